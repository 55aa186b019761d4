"""Exception types shared across the package."""


class OEDError(Exception):
    """Base class for all package errors."""


class ParameterDomainError(OEDError, ValueError):
    """A hyperparameter or dimension is outside its admissible range."""


class DimensionError(OEDError, ValueError):
    """Array shapes are inconsistent."""


class NonConvergenceError(OEDError, RuntimeError):
    """An iterative solver stopped before reaching its tolerance.

    ``residual`` carries the last residual (or gradient) norm and ``iterate``
    the best point found, when available.
    """

    def __init__(self, message, residual=None, iterate=None):
        super().__init__(message)
        self.residual = residual
        self.iterate = iterate


class NumericalValidityError(OEDError, ValueError):
    """Input violates a numerical precondition (e.g. negative eigenvalue)."""


class ContainerError(OEDError, IOError):
    """A data container is malformed or fails its checksum."""


class ConfigError(OEDError, ValueError):
    """Run configuration is invalid."""
