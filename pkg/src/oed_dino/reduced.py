"""Surrogate-based MAP estimation and misfit eigenproblem in reduced coordinates."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.optimize import line_search

from .errors import DimensionError, NumericalValidityError, ParameterDomainError
from .forward import Design
from .laplace import LaplaceResult, noise_matrix
from .prior import PriorModel
from .reduce import DIS
from .surrogate import Adam, Surrogate


class LbfgsWarning(UserWarning):
    pass


@dataclass
class LbfgsConfig:
    memory: int = 10
    max_iter: int = 100
    grad_tol: float = 1e-8


@dataclass
class LbfgsResult:
    x: np.ndarray
    value: float
    grad: np.ndarray
    iterations: int
    converged: bool
    grad_norm0: float


def lbfgs(fun, x0, config: LbfgsConfig | None = None) -> LbfgsResult:
    """Limited-memory BFGS with a strong-Wolfe line search.

    ``fun(x)`` returns ``(value, gradient)``.  Stops when
    ``|g| <= grad_tol * max(1, |g0|)``.
    """
    cfg = config or LbfgsConfig()
    cache = {}

    def fg(x):
        key = x.tobytes()
        if key not in cache:
            cache.clear()
            v, g = fun(x)
            cache[key] = (float(v), np.asarray(g, dtype=float))
        return cache[key]

    x = np.array(x0, dtype=float)
    f, g = fg(x)
    g0 = np.linalg.norm(g)
    stop = cfg.grad_tol * max(1.0, g0)
    S, Y = [], []
    it = 0
    while np.linalg.norm(g) > stop:
        if it >= cfg.max_iter:
            return LbfgsResult(x, f, g, it, False, g0)
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(S), reversed(Y)):
            a = (s @ q) / (y @ s)
            alphas.append(a)
            q -= a * y
        if S:
            q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        for (s, y), a in zip(zip(S, Y), reversed(alphas)):
            q += s * (a - (y @ q) / (y @ s))
        d = -q
        if not S or g @ d >= 0:
            S, Y, d = [], [], _steepest(g)
        step = _wolfe(fg, x, d, g, f)
        if step is None and S:
            S, Y, d = [], [], _steepest(g)
            step = _wolfe(fg, x, d, g, f)
        if step is None:
            return LbfgsResult(x, f, g, it, False, g0)
        x_new = x + step * d
        f_new, g_new = fg(x_new)
        s, y = x_new - x, g_new - g
        if s @ y > 1e-14 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Y.append(y)
            if len(S) > cfg.memory:
                S.pop(0)
                Y.pop(0)
        x, f, g = x_new, f_new, g_new
        it += 1
    return LbfgsResult(x, f, g, it, True, g0)


def _steepest(g):
    # unit-length first step; the curvature pairs set the scale afterwards
    return -g / max(1.0, np.linalg.norm(g))


def _wolfe(fg, x, d, g, f):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        step = line_search(lambda z: fg(z)[0], lambda z: fg(z)[1], x, d, gfk=g, old_fval=f, maxiter=50)[0]
    return step if step is not None else _approx_wolfe(fg, x, d, g, f)


def _approx_wolfe(fg, x, d, g, f, delta=0.1, sigma=0.9, eps=1e-10):
    """Hager-Zhang approximate Wolfe test for when ``f`` differences drown in rounding."""
    slope = g @ d
    alpha = 1.0
    for _ in range(20):
        f_a, g_a = fg(x + alpha * d)
        s_a = g_a @ d
        if f_a <= f + eps * abs(f) and sigma * slope <= s_a <= (2 * delta - 1) * slope:
            return alpha
        alpha *= 0.5
    return None


class ReducedMapProblem:
    """Reduced MAP objective ``1/2 |y - xi^T (F_bar + Psi_F Phi(beta))|^2 + 1/2 beta^T Gamma_m beta``."""

    def __init__(self, surrogate: Surrogate, design, y, noise, lbfgs_config: LbfgsConfig | None = None):
        self.surrogate = surrogate
        d_s = surrogate.output_basis.dim
        self.design = design if isinstance(design, Design) else Design(design, d_s)
        idx = self.design.indices
        if np.ndim(noise) == 0 or np.shape(noise)[0] == d_s:
            self.noise_cov = noise_matrix(noise, d_s)[np.ix_(idx, idx)]
        else:
            self.noise_cov = noise_matrix(noise, len(idx))
        self.y = np.asarray(y, dtype=float)
        if self.y.shape != (len(idx),):
            raise DimensionError(f"data has shape {self.y.shape}, design has {len(idx)} sensors")
        self.noise_chol = np.linalg.cholesky(self.noise_cov) if len(idx) else np.zeros((0, 0))
        ib = surrogate.input_basis
        self.gamma_m = ib.psi.T @ ib.dual
        self.gamma_m = 0.5 * (self.gamma_m + self.gamma_m.T)
        self.is_identity = np.abs(self.gamma_m - np.eye(ib.rank)).max() <= 1e-8 if ib.rank else True
        if ib.kind == DIS and not self.is_identity:
            raise NumericalValidityError("DIS basis is not prior-orthonormal")
        self.psi_xi = surrogate.output_basis.psi[idx]
        self.center_xi = surrogate.output_basis.center[idx]
        self.lbfgs = lbfgs_config or LbfgsConfig()

    @property
    def r_m(self):
        return self.surrogate.r_m

    def noise_inv(self, r):
        return sla.cho_solve((self.noise_chol, True), r) if len(r) else r

    def __call__(self, beta):
        out, jac = self.surrogate.net.forward_and_jacobian(beta)
        r = self.center_xi + self.psi_xi @ out - self.y
        wr = self.noise_inv(r)
        gb = self.gamma_m @ beta
        value = 0.5 * r @ wr + 0.5 * beta @ gb
        grad = jac.T @ (self.psi_xi.T @ wr) + gb
        return value, grad

    def lift(self, beta):
        return self.surrogate.input_basis.decode(beta)


def parse_warmstart(spec: str | None):
    """``"adam:ITERS:LR"`` -> (iters, lr); ``None`` passes through."""
    if spec is None:
        return None
    parts = spec.split(":")
    if len(parts) != 3 or parts[0] != "adam":
        raise ParameterDomainError(f"warm start must look like adam:ITERS:LR, got {spec!r}")
    try:
        return int(parts[1]), float(parts[2])
    except ValueError as exc:
        raise ParameterDomainError(f"bad warm start {spec!r}") from exc


def map_reduced(problem: ReducedMapProblem, beta0=None, warmstart=None) -> LaplaceResult:
    """Reduced MAP by L-BFGS from ``beta0`` (default 0), optionally after Adam steps."""
    beta = np.zeros(problem.r_m) if beta0 is None else np.array(beta0, dtype=float)
    ws = parse_warmstart(warmstart) if isinstance(warmstart, str) else warmstart
    if ws is not None:
        iters, lr = ws
        opt = Adam(lr)
        for _ in range(iters):
            beta = opt.step(beta, problem(beta)[1])
    res = lbfgs(problem, beta, problem.lbfgs)
    if not res.converged:
        warnings.warn(
            f"reduced MAP stopped after {res.iterations} iterations with |g| = {np.linalg.norm(res.grad):.3e}",
            LbfgsWarning,
            stacklevel=2,
        )
    stats = {
        "beta": res.x,
        "iterations": res.iterations,
        "converged": res.converged,
        "grad_norm": float(np.linalg.norm(res.grad)),
        "grad_norm0": float(res.grad_norm0),
        "objective": res.value,
    }
    return LaplaceResult(problem.lift(res.x), stats=stats)


def reduced_hessian(problem: ReducedMapProblem, beta):
    """``dPhi^T Psi_F^T xi Gamma_n^-1 xi^T Psi_F dPhi`` and its square-root factor."""
    jac = problem.surrogate.net.jacobian(beta)
    if len(problem.y) == 0:
        return np.zeros((problem.r_m, problem.r_m)), np.zeros((0, problem.r_m))
    R = sla.solve_triangular(problem.noise_chol, problem.psi_xi @ jac, lower=True)
    return R.T @ R, R


def eig_reduced(problem: ReducedMapProblem, beta) -> LaplaceResult:
    """All ``r_m`` reduced misfit eigenpairs, sorted nonincreasing."""
    H, R = reduced_hessian(problem, np.asarray(beta, dtype=float))
    if problem.is_identity:
        lam, U = np.linalg.eigh(0.5 * (H + H.T))
    else:
        lam, U = sla.eigh(0.5 * (H + H.T), problem.gamma_m)
    order = np.argsort(lam)[::-1]
    lam = np.clip(lam[order], 0.0, None)
    U = U[:, order]
    W = problem.surrogate.input_basis.psi @ U
    return LaplaceResult(problem.lift(beta), lam, W, U, {"beta": np.asarray(beta), "S_reduced": R})


def laplace_reduced(problem: ReducedMapProblem, warmstart=None) -> LaplaceResult:
    res = map_reduced(problem, warmstart=warmstart)
    eig = eig_reduced(problem, res.stats["beta"])
    eig.stats.update(res.stats)
    return eig


def map_error_metrics(m_map, m_hat, prior: PriorModel) -> dict:
    """Relative MAP errors in the mass-matrix norm and the prior-precision norm.

    Both are relative to the deviation of the reference MAP point from the
    prior mean.
    """
    m_map = np.asarray(m_map, dtype=float)
    diff = m_map - np.asarray(m_hat, dtype=float)
    ref = m_map - prior.mean
    l2_ref = ref @ (prior.M @ ref)
    pr_ref = prior.norm2(ref)
    if l2_ref <= 0 or pr_ref <= 0:
        raise NumericalValidityError("reference MAP point coincides with the prior mean")
    return {
        "l2": float(np.sqrt(diff @ (prior.M @ diff) / l2_ref)),
        "prior": float(np.sqrt(prior.norm2(diff) / pr_ref)),
    }
