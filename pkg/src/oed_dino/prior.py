"""Gaussian Matern prior (alpha = 2) discretized with P1 finite elements.

The prior precision is ``A M^-1 A`` where ``M`` is the mass matrix and ``A``
the stiffness matrix of ``-gamma * Laplace + kappa`` with natural (Neumann)
boundary conditions.  The square root ``A^-1 L_M`` with ``L_M L_M^T = M``
is used for sampling and whitening, so no matrix square roots are formed.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import DimensionError, ParameterDomainError
from .mesh import Mesh2D, assemble, local_matrices


def sample_rng(seed: int, index: int = 0, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed on (seed, index), with optional independent streams."""
    key = [int(seed), int(index)] + ([int(stream)] if stream else [])
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


class BandedSPD:
    """Banded Cholesky factorization ``K = L L^T`` of a sparse SPD matrix."""

    def __init__(self, K: sp.spmatrix):
        K = sp.csr_matrix(K)
        N = K.shape[0]
        coo = K.tocoo()
        lower = coo.row >= coo.col
        bw = int((coo.row - coo.col)[lower].max()) if lower.any() else 0
        ab = np.zeros((bw + 1, N))
        ab[(coo.row - coo.col)[lower], coo.col[lower]] = coo.data[lower]
        self.n = N
        self.bw = bw
        self.cb = sla.cholesky_banded(ab, lower=True)
        # upper-banded copy of L^T for solve_banded
        ub = np.zeros_like(self.cb)
        for k in range(bw + 1):
            ub[bw - k, k:] = self.cb[k, : N - k]
        self._upper = ub

        rows, cols, vals = [], [], []
        for k in range(bw + 1):
            j = np.arange(N - k)
            rows.append(j + k)
            cols.append(j)
            vals.append(self.cb[k, : N - k])
        self.L = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
        )

    def solve(self, b):
        return sla.cho_solve_banded((self.cb, True), b)

    def solve_L(self, b):
        return sla.solve_banded((self.bw, 0), self.cb, b)

    def solve_Lt(self, b):
        return sla.solve_banded((0, self.bw), self._upper, b)


class PriorModel:
    """Discretized Matern prior N(mean, A^-1 M A^-1).

    Immutable after construction; every method is a pure function of its inputs.
    """

    alpha = 2

    def __init__(self, mesh: Mesh2D, gamma: float, kappa: float, mean=None):
        if not (gamma > 0):
            raise ParameterDomainError(f"gamma must be positive, got {gamma}")
        if not (kappa > 0):
            raise ParameterDomainError(f"kappa must be positive, got {kappa}")
        self.mesh = mesh
        self.gamma = float(gamma)
        self.kappa = float(kappa)
        d = mesh.node_count
        if mean is None:
            mean = np.zeros(d)
        mean = np.asarray(mean, dtype=float)
        if mean.shape != (d,):
            raise DimensionError(f"mean has shape {mean.shape}, expected ({d},)")
        self.mean = mean
        self.mean.setflags(write=False)

        Me, Ke = local_matrices(mesh)
        self.M = assemble(mesh, Me)
        self.A = assemble(mesh, self.gamma * Ke + self.kappa * Me)
        self.chol_M = BandedSPD(self.M)
        self.fact_A = BandedSPD(self.A)

    @property
    def dim(self) -> int:
        return self.mesh.node_count

    def _check(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.dim:
            raise DimensionError(f"vector of length {v.shape[0]} on a prior of dimension {self.dim}")
        return v

    # square-root actions ---------------------------------------------------
    def sqrt_apply(self, eta):
        """Apply the covariance square root ``A^-1 L_M``."""
        return self.fact_A.solve(self.chol_M.L @ self._check(eta))

    def sqrt_apply_T(self, v):
        """Apply ``L_M^T A^-1``, the transpose of :meth:`sqrt_apply`."""
        return self.chol_M.L.T @ self.fact_A.solve(self._check(v))

    def whiten(self, m):
        """Map a parameter to its white-noise coordinates ``L_M^-1 A (m - mean)``."""
        m = self._check(m)
        dm = m - (self.mean if m.ndim == 1 else self.mean[:, None])
        return self.chol_M.solve_L(self.A @ dm)

    def color(self, eta):
        eta = self._check(eta)
        out = self.sqrt_apply(eta)
        return out + (self.mean if eta.ndim == 1 else self.mean[:, None])

    # covariance and precision ----------------------------------------------
    def precision_apply(self, v):
        """Apply ``Gamma_prior^-1 = A M^-1 A``."""
        v = self._check(v)
        return self.A @ self.chol_M.solve(self.A @ v)

    def covariance_apply(self, v):
        """Apply ``Gamma_prior = A^-1 M A^-1``."""
        v = self._check(v)
        return self.fact_A.solve(self.M @ self.fact_A.solve(v))

    def dense_covariance(self):
        Ainv = np.linalg.inv(self.A.toarray())
        return Ainv @ self.M.toarray() @ Ainv

    def dense_precision(self):
        Ad = self.A.toarray()
        return Ad @ np.linalg.solve(self.M.toarray(), Ad)

    def inner(self, u, v) -> float:
        u, v = self._check(u), self._check(v)
        return float((self.A @ u) @ self.chol_M.solve(self.A @ v))

    def norm2(self, u) -> float:
        return self.inner(u, u)

    def sample(self, seed: int, index: int = 0):
        eta = sample_rng(seed, index).standard_normal(self.dim)
        return self.color(eta)


def build_prior(n: int, gamma: float, kappa: float, mean=None, diagonal: str = "ne") -> PriorModel:
    """Assemble the Matern prior on an ``n x n`` cell mesh of the unit square."""
    if int(n) != n or n < 2:
        raise ParameterDomainError(f"need at least 2 cells per side, got {n}")
    return PriorModel(Mesh2D(int(n), diagonal), gamma, kappa, mean)


def sample_prior(prior: PriorModel, seed: int, index: int = 0):
    """Draw ``mean + A^-1 L_M eta`` with ``eta`` from the (seed, index) stream."""
    return prior.sample(seed, index)


def prior_inner(prior: PriorModel, u, v) -> float:
    """Inner product ``(A u)^T M^-1 (A v)``."""
    return prior.inner(u, v)


def prior_norm2(prior: PriorModel, u) -> float:
    return prior.inner(u, u)
