"""Forward PDE solves, pointwise observations and adjoint/tangent Jacobians.

Two state equations are supported on the unit square:

* ``linear_diffusion``: ``-div(exp(m) grad u) = 0`` with ``u = 1`` on the top,
  ``u = 0`` on the bottom and no-flux sides;
* ``semilinear_reaction``: ``-nu Laplace u + exp(m) u^3 = f`` with ``u = 0`` on
  the whole boundary, solved by damped Newton.

Both use P1 elements.  The diffusion coefficient is the element average of the
nodal values of ``exp(m)``; the reaction term is interpolated nodally,
``M (exp(m) * u^3)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimensionError, NonConvergenceError, ParameterDomainError
from .mesh import Mesh2D, assemble, interpolation_matrix, local_matrices

LINEAR_DIFFUSION = "linear_diffusion"
SEMILINEAR_REACTION = "semilinear_reaction"
KINDS = (LINEAR_DIFFUSION, SEMILINEAR_REACTION)


def gaussian_bump(coords, center=(0.7, 0.7)):
    r2 = ((coords - np.asarray(center)) ** 2).sum(axis=1)
    return np.maximum(0.5, np.exp(-25.0 * r2))


class ForwardModel:
    """State equation on a fixed mesh.  Immutable; ``solve`` is pure in ``m``."""

    def __init__(
        self,
        kind: str,
        mesh: Mesh2D,
        nu: float = 0.01,
        source=None,
        newton_tol: float = 1e-10,
        newton_max: int = 25,
    ):
        if kind not in KINDS:
            raise ParameterDomainError(f"unknown problem kind {kind!r}; expected one of {KINDS}")
        if nu <= 0:
            raise ParameterDomainError("nu must be positive")
        self.kind = kind
        self.mesh = mesh
        self.nu = float(nu)
        self.newton_tol = newton_tol
        self.newton_max = newton_max

        Me, Ke = local_matrices(mesh)
        self._Me, self._Ke = Me, Ke
        self.M = assemble(mesh, Me)
        N = mesh.node_count

        if kind == LINEAR_DIFFUSION:
            bottom = mesh.boundary_nodes("bottom")
            top = mesh.boundary_nodes("top")
            dirichlet = np.union1d(bottom, top)
            self.u_dirichlet = np.zeros(N)
            self.u_dirichlet[top] = 1.0
            self.source = np.zeros(N)
        else:
            dirichlet = mesh.boundary_nodes("all")
            self.u_dirichlet = np.zeros(N)
            self.source = gaussian_bump(mesh.coords) if source is None else np.asarray(source, float)
            self.K = assemble(mesh, Ke)
            self._load = self.M @ self.source
        self.dirichlet = dirichlet
        self.free = np.setdiff1d(np.arange(N), dirichlet)

        # scatter pattern for d(K(m) u)/dm: entry (row=node a of e, col=node v of e)
        cells = mesh.cells
        self._dm_rows = np.repeat(cells, 3, axis=1).ravel()
        self._dm_cols = np.tile(cells, (1, 3)).ravel()

    @property
    def dim(self) -> int:
        return self.mesh.node_count

    # ---- linear diffusion ----
    def _diffusion_operator(self, m):
        coef = np.exp(m)[self.mesh.cells].mean(axis=1)
        return assemble(self.mesh, coef[:, None, None] * self._Ke)

    def _diffusion_dRdm(self, m, u):
        cells = self.mesh.cells
        Ku = np.einsum("eab,eb->ea", self._Ke, u[cells])
        w = np.exp(m)[cells] / 3.0
        vals = (Ku[:, :, None] * w[:, None, :]).ravel()
        C = sp.coo_matrix((vals, (self._dm_rows, self._dm_cols)), shape=(self.dim, self.dim))
        return C.tocsr()[self.free]

    # ---- semilinear reaction ----
    def _reaction_residual(self, m, u):
        return (self.nu * (self.K @ u) + self.M @ (np.exp(m) * u**3) - self._load)[self.free]

    def _reaction_dRdu(self, m, u):
        D = sp.diags(3.0 * np.exp(m) * u**2)
        return (self.nu * self.K + self.M @ D).tocsr()[self.free][:, self.free]

    def residual(self, m, u):
        """Discrete residual restricted to the free nodes."""
        if self.kind == LINEAR_DIFFUSION:
            return (self._diffusion_operator(m) @ u)[self.free]
        return self._reaction_residual(m, u)

    def solve(self, m, u0=None) -> "StateSolution":
        m = np.asarray(m, dtype=float)
        if m.shape != (self.dim,):
            raise DimensionError(f"parameter has shape {m.shape}, expected ({self.dim},)")
        free = self.free
        if self.kind == LINEAR_DIFFUSION:
            K = self._diffusion_operator(m)
            Kff = K[free][:, free].tocsc()
            rhs = -(K[free] @ self.u_dirichlet)
            lu = spla.splu(Kff)
            u = self.u_dirichlet.copy()
            u[free] = lu.solve(rhs)
            res = np.linalg.norm(K[free] @ u)
            return StateSolution(self, m, u, lu, self._diffusion_dRdm(m, u), [res])

        u = self.u_dirichlet.copy() if u0 is None else np.array(u0, dtype=float)
        r = self._reaction_residual(m, u)
        history = [np.linalg.norm(r)]
        for _ in range(self.newton_max):
            if history[-1] < self.newton_tol:
                break
            lu = spla.splu(self._reaction_dRdu(m, u).tocsc())
            step = lu.solve(-r)
            alpha = 1.0
            for _ in range(21):
                trial = u.copy()
                trial[free] += alpha * step
                r_trial = self._reaction_residual(m, trial)
                if np.linalg.norm(r_trial) < history[-1]:
                    break
                alpha *= 0.5
            else:
                raise NonConvergenceError(
                    "Newton line search failed", residual=history[-1], iterate=u
                )
            u, r = trial, r_trial
            history.append(np.linalg.norm(r))
        if history[-1] >= self.newton_tol:
            raise NonConvergenceError(
                f"Newton did not converge in {self.newton_max} steps (residual {history[-1]:.3e})",
                residual=history[-1],
                iterate=u,
            )
        lu = spla.splu(self._reaction_dRdu(m, u).tocsc())
        dRdm = (self.M @ sp.diags(np.exp(m) * u**3)).tocsr()[free]
        return StateSolution(self, m, u, lu, dRdm, history)


@dataclass
class StateSolution:
    """Converged state with a reusable factorization of the linearized operator."""

    model: ForwardModel
    m: np.ndarray
    u: np.ndarray
    lu: object = field(repr=False)
    dRdm: sp.csr_matrix = field(repr=False)
    residual_history: list = field(default_factory=list)

    @property
    def newton_iterations(self) -> int:
        return len(self.residual_history) - 1

    def tangent(self, V):
        """Nodal state sensitivities ``du = -(dR/du)^-1 (dR/dm) V`` on free nodes."""
        return -self.lu.solve(np.asarray(self.dRdm @ V))

    def adjoint(self, rhs_free):
        """Solve ``(dR/du)^T p = rhs`` on free nodes."""
        return self.lu.solve(np.asarray(rhs_free), trans="T")


class SensorGrid:
    """Candidate sensor locations and their P1 interpolation rows."""

    def __init__(self, mesh: Mesh2D, locations):
        locations = np.atleast_2d(np.asarray(locations, dtype=float))
        if locations.shape[1] != 2:
            raise DimensionError("sensor locations must be (x, y) pairs")
        if (locations <= 0).any() or (locations >= 1).any():
            raise ParameterDomainError("sensor locations must lie in the open unit square")
        self.mesh = mesh
        self.locations = locations
        self.B = interpolation_matrix(mesh, locations)

    @property
    def count(self) -> int:
        return len(self.locations)


def _grid_shape(d_s: int, aspect: float):
    pairs = [(d_s // ny, ny) for ny in range(1, d_s + 1) if d_s % ny == 0]
    return min(pairs, key=lambda p: (abs(np.log(p[0] / p[1] / aspect)), -p[0]))


def sensor_layout(layout: str, d_s: int):
    """Regular cell-centred sensor sub-grid: ``"lower"`` half or ``"full"`` square."""
    if d_s < 1:
        raise ParameterDomainError("need at least one sensor")
    if layout == "lower":
        nx, ny = _grid_shape(d_s, 2.0)
        height = 0.5
    elif layout == "full":
        nx, ny = _grid_shape(d_s, 1.0)
        height = 1.0
    else:
        raise ParameterDomainError(f"unknown sensor layout {layout!r}")
    xs = (np.arange(nx) + 0.5) / nx
    ys = height * (np.arange(ny) + 0.5) / ny
    X, Y = np.meshgrid(xs, ys)
    return np.column_stack([X.ravel(), Y.ravel()])


@dataclass(frozen=True)
class Design:
    """Ordered selection of distinct candidate sensor indices."""

    selected: tuple

    def __init__(self, selected: Sequence[int] = (), d_s: int | None = None):
        sel = tuple(int(s) for s in selected)
        if len(set(sel)) != len(sel):
            raise ParameterDomainError(f"design has duplicate sensors: {sel}")
        if d_s is not None and any(s < 0 or s >= d_s for s in sel):
            raise ParameterDomainError(f"design index out of range [0, {d_s}): {sel}")
        object.__setattr__(self, "selected", sel)

    def __len__(self):
        return len(self.selected)

    def __iter__(self):
        return iter(self.selected)

    @property
    def indices(self) -> np.ndarray:
        return np.asarray(self.selected, dtype=int)

    def matrix(self, d_s: int) -> np.ndarray:
        """The 0/1 design matrix of shape (d_s, r_s)."""
        xi = np.zeros((d_s, len(self.selected)))
        xi[self.indices, np.arange(len(self.selected))] = 1.0
        return xi


def restrict(F, design) -> np.ndarray:
    """Select entries (or rows) of ``F`` at the design's sensors, in selection order."""
    F = np.asarray(F)
    idx = design.indices if isinstance(design, Design) else np.asarray(design, dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= F.shape[0]):
        raise ParameterDomainError(f"design index out of range for {F.shape[0]} observables")
    return F[idx]


def solve_state(model: ForwardModel, m) -> StateSolution:
    return model.solve(m)


def observe(state: StateSolution, sensors: SensorGrid) -> np.ndarray:
    return sensors.B @ state.u


def jacobian_full(model: ForwardModel, state: StateSolution, sensors: SensorGrid) -> np.ndarray:
    """Full ``d_s x d_m`` Jacobian from ``d_s`` adjoint solves sharing one factorization."""
    Bf = sensors.B[:, model.free].toarray().T
    P = state.adjoint(Bf)
    return -np.asarray((state.dRdm.T @ P).T)


def reduced_jacobian(model, state, sensors, psi_m, psi_F) -> np.ndarray:
    """``psi_F^T J psi_m`` with ``min(r_F, r_m)`` linearized solves."""
    psi_m = np.asarray(psi_m)
    psi_F = np.asarray(psi_F)
    r_m, r_F = psi_m.shape[1], psi_F.shape[1]
    if r_F == 0 or r_m == 0:
        return np.zeros((r_F, r_m))
    Bf = sensors.B[:, model.free]
    if r_F <= r_m:
        P = state.adjoint(np.asarray(Bf.T @ psi_F))
        JtPsi = -(state.dRdm.T @ P)
        return np.asarray(JtPsi.T @ psi_m)
    du = state.tangent(psi_m)
    return psi_F.T @ np.asarray(Bf @ du)


class Linearization:
    """Observables and Jacobian actions of a PtO map at one parameter."""

    def __init__(self, F, jvp, vjp, state=None):
        self.F = F
        self._jvp = jvp
        self._vjp = vjp
        self.state = state

    def jvp(self, V):
        return self._jvp(V)

    def vjp(self, W):
        return self._vjp(W)

    def jacobian(self):
        return np.asarray(self.vjp(np.eye(len(self.F)))).T


class PDEObservable:
    """Parameter-to-observable map ``m -> B u(m)`` with solve accounting."""

    def __init__(self, model: ForwardModel, sensors: SensorGrid):
        if sensors.mesh.node_count != model.dim:
            raise DimensionError("sensor grid and forward model live on different meshes")
        self.model = model
        self.sensors = sensors
        self._Bf = sensors.B[:, model.free].tocsr()
        self._BfT = self._Bf.T.tocsr()
        self.state_solves = 0
        self.linearized_solves = 0

    @property
    def d_m(self) -> int:
        return self.model.dim

    @property
    def d_s(self) -> int:
        return self.sensors.count

    def observables(self, m):
        self.state_solves += 1
        return observe(self.model.solve(m), self.sensors)

    def linearize(self, m) -> Linearization:
        state = self.model.solve(m)
        self.state_solves += 1

        def jvp(V):
            V = np.asarray(V, dtype=float)
            self.linearized_solves += 1 if V.ndim == 1 else V.shape[1]
            return np.asarray(self._Bf @ state.tangent(V))

        def vjp(W):
            W = np.asarray(W, dtype=float)
            self.linearized_solves += 1 if W.ndim == 1 else W.shape[1]
            P = state.adjoint(np.asarray(self._BfT @ W))
            return -np.asarray(state.dRdm.T @ P)

        return Linearization(observe(state, self.sensors), jvp, vjp, state)

    def reduced_jacobian(self, m, psi_m, psi_F):
        lin = self.linearize(m)
        r = min(np.shape(psi_m)[1], np.shape(psi_F)[1])
        self.linearized_solves += r
        return lin.F, reduced_jacobian(self.model, lin.state, self.sensors, psi_m, psi_F)


class LinearObservable:
    """Affine PtO map ``m -> G m + b`` sharing the :class:`PDEObservable` interface."""

    def __init__(self, G, b=None):
        self.G = np.asarray(G, dtype=float)
        self.b = np.zeros(self.G.shape[0]) if b is None else np.asarray(b, dtype=float)
        self.state_solves = 0
        self.linearized_solves = 0

    @property
    def d_m(self) -> int:
        return self.G.shape[1]

    @property
    def d_s(self) -> int:
        return self.G.shape[0]

    def observables(self, m):
        return self.G @ m + self.b

    def linearize(self, m) -> Linearization:
        return Linearization(self.G @ m + self.b, lambda V: self.G @ V, lambda W: self.G.T @ W)

    def reduced_jacobian(self, m, psi_m, psi_F):
        return self.observables(m), psi_F.T @ self.G @ psi_m
