"""High-fidelity Laplace approximation: MAP point, misfit eigenpairs, posterior covariance.

All Hessians are Gauss-Newton.  The MAP problem is solved by inexact
Newton-CG preconditioned with the prior covariance, so the CG iteration sees
``I + (low rank)`` and converges in roughly ``r_s`` steps.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import DimensionError, NonConvergenceError, ParameterDomainError
from .forward import Design
from .prior import PriorModel

log = logging.getLogger(__name__)


def noise_matrix(noise, n: int) -> np.ndarray:
    """``sigma -> sigma^2 I``; a matrix is returned as is after a shape check."""
    if np.ndim(noise) == 0:
        if not noise > 0:
            raise ParameterDomainError(f"noise standard deviation must be positive, got {noise}")
        return float(noise) ** 2 * np.eye(n)
    C = np.asarray(noise, dtype=float)
    if C.shape != (n, n):
        raise DimensionError(f"noise covariance has shape {C.shape}, expected ({n}, {n})")
    return C


class InverseProblem:
    """Data ``y`` observed at the sensors of ``design`` through a linearizable PtO map.

    ``noise`` is a standard deviation or the ``d_s x d_s`` covariance over all
    candidate sensors; the design's sub-block is used.
    """

    def __init__(self, pto, prior: PriorModel, design, y, noise):
        self.pto = pto
        self.prior = prior
        self.design = design if isinstance(design, Design) else Design(design, pto.d_s)
        if pto.d_m != prior.dim:
            raise DimensionError("PtO map and prior have different parameter dimensions")
        idx = self.design.indices
        full = noise_matrix(noise, pto.d_s) if np.ndim(noise) == 0 or np.shape(noise)[0] == pto.d_s else None
        self.noise_cov = full[np.ix_(idx, idx)] if full is not None else noise_matrix(noise, len(idx))
        self.y = np.asarray(y, dtype=float)
        if self.y.shape != (len(idx),):
            raise DimensionError(f"data has shape {self.y.shape}, design has {len(idx)} sensors")
        try:
            self.noise_chol = np.linalg.cholesky(self.noise_cov) if len(idx) else np.zeros((0, 0))
        except np.linalg.LinAlgError as exc:
            raise ParameterDomainError("noise covariance is not SPD") from exc

    @property
    def r_s(self) -> int:
        return len(self.design)

    def noise_inv(self, r):
        return sla.cho_solve((self.noise_chol, True), r) if self.r_s else r

    def scatter(self, w):
        """``xi w``: place sensor-space values into the full candidate vector."""
        w = np.asarray(w, dtype=float)
        out = np.zeros((self.pto.d_s,) + w.shape[1:])
        out[self.design.indices] = w
        return out

    def evaluate(self, m):
        """Objective value, gradient and the linearization at ``m``."""
        lin = self.pto.linearize(m)
        r = lin.F[self.design.indices] - self.y
        wr = self.noise_inv(r)
        dm = m - self.prior.mean
        value = 0.5 * r @ wr + 0.5 * self.prior.norm2(dm)
        grad = lin.vjp(self.scatter(wr)) + self.prior.precision_apply(dm)
        return value, grad, lin

    def gn_hessian_apply(self, lin, v):
        Jv = lin.jvp(v)[self.design.indices]
        return lin.vjp(self.scatter(self.noise_inv(Jv))) + self.prior.precision_apply(v)


@dataclass
class LaplaceResult:
    m_map: np.ndarray
    eigvals: np.ndarray | None = None
    eigvecs: np.ndarray | None = None
    whitened: np.ndarray | None = field(default=None, repr=False)
    stats: dict = field(default_factory=dict)


def _pcg(apply_H, precond, b, rtol, maxiter):
    """Preconditioned CG for SPD systems; returns (x, iterations)."""
    x = np.zeros_like(b)
    r = b.copy()
    z = precond(r)
    rz = r @ z
    target = rtol * np.sqrt(max(rz, 0.0))
    p = z.copy()
    for k in range(1, maxiter + 1):
        if np.sqrt(max(rz, 0.0)) <= target:
            return x, k - 1
        Hp = apply_H(p)
        curv = p @ Hp
        if curv <= 0:
            return (x if k > 1 else p), k
        alpha = rz / curv
        x += alpha * p
        r -= alpha * Hp
        z = precond(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, maxiter


def _approx_wolfe(f, slope, f_a, s_a, delta=0.1, sigma=0.9, eps=1e-10):
    """Hager-Zhang approximate Wolfe test, for steps whose decrease is below rounding in ``f``."""
    return f_a <= f + eps * abs(f) and sigma * slope <= s_a <= (2 * delta - 1) * slope


def map_hifi(problem: InverseProblem, m0=None, tol: float = 1e-8, max_newton: int = 50,
             cg_max: int | None = None) -> LaplaceResult:
    """Inexact Newton-CG for the MAP point.

    Gradient norms are measured in the prior covariance metric,
    ``|g|^2 = g^T Gamma_prior g``, which is the Euclidean norm in whitened
    coordinates.
    """
    prior = problem.prior
    m = prior.mean.copy() if m0 is None else np.array(m0, dtype=float)
    cg_max = cg_max or min(prior.dim, 2 * problem.r_s + 20)
    value, grad, lin = problem.evaluate(m)
    gnorm = lambda g: np.sqrt(max(g @ prior.covariance_apply(g), 0.0))
    g0 = gnorm(grad)
    stop = tol * max(1.0, g0)
    cg_total, newton = 0, 0
    history = [value]
    gn = g0
    while gn > stop:
        if newton >= max_newton:
            raise NonConvergenceError(
                f"Newton-CG did not converge in {max_newton} iterations (|g| = {gn:.3e})", residual=gn, iterate=m
            )
        forcing = min(0.5, np.sqrt(gn))
        step, its = _pcg(lambda v: problem.gn_hessian_apply(lin, v), prior.covariance_apply, -grad, forcing, cg_max)
        cg_total += its
        slope = grad @ step
        alpha = 1.0
        for _ in range(30):
            m_try = m + alpha * step
            v_try, g_try, lin_try = problem.evaluate(m_try)
            if v_try <= value + 1e-4 * alpha * slope or _approx_wolfe(value, slope, v_try, g_try @ step):
                break
            alpha *= 0.5
        else:
            raise NonConvergenceError("Armijo backtracking failed", residual=gn, iterate=m)
        m, value, grad, lin = m_try, v_try, g_try, lin_try
        history.append(value)
        gn = gnorm(grad)
        newton += 1
    stats = {
        "newton_iterations": newton,
        "cg_iterations": cg_total,
        "avg_cg": cg_total / newton if newton else 0.0,
        "grad_norm": gn,
        "grad_norm0": g0,
        "objective": np.asarray(history),
    }
    return LaplaceResult(m, stats=stats)


def whitened_jacobian(problem: InverseProblem, lin) -> np.ndarray:
    """``S = L_n^-1 J_xi A^-1 L_M`` as an ``r_s x d_m`` matrix (``r_s`` adjoint solves)."""
    if problem.r_s == 0:
        return np.zeros((0, problem.prior.dim))
    Linv = sla.solve_triangular(problem.noise_chol, np.eye(problem.r_s), lower=True)
    JtLt = lin.vjp(problem.scatter(Linv.T))
    return problem.prior.sqrt_apply_T(JtLt).T


def gen_eig_hifi(problem: InverseProblem, m_map, r: int | None = None) -> LaplaceResult:
    """Eigenpairs of ``H_GN w = lambda Gamma_prior^-1 w`` by an SVD of the whitened Jacobian."""
    r = problem.r_s if r is None else min(int(r), problem.r_s)
    lin = problem.pto.linearize(m_map)
    S = whitened_jacobian(problem, lin)
    if r == 0:
        d = problem.prior.dim
        return LaplaceResult(np.asarray(m_map), np.zeros(0), np.zeros((d, 0)), np.zeros((d, 0)), {"S": S})
    _, s, Vt = np.linalg.svd(S, full_matrices=False)
    V = Vt[:r].T
    V = V * np.where(V[np.argmax(np.abs(V), axis=0), np.arange(r)] < 0, -1.0, 1.0)
    W = problem.prior.sqrt_apply(V)
    return LaplaceResult(np.asarray(m_map), s[:r] ** 2, W, V, {"S": S})


def posterior_cov_apply(prior: PriorModel, eig: LaplaceResult, v):
    """``(Gamma_prior - W D W^T) v`` with ``D = diag(lambda / (1 + lambda))``."""
    lam = np.clip(eig.eigvals, 0.0, None)
    W = eig.eigvecs
    D = lam / (1.0 + lam)
    v = np.asarray(v, dtype=float)
    coef = W.T @ v
    coef = D * coef if v.ndim == 1 else D[:, None] * coef
    return prior.covariance_apply(v) - W @ coef


def laplace_hifi(problem: InverseProblem, r=None, m0=None, tol=1e-8, max_newton=50) -> LaplaceResult:
    """MAP point followed by the misfit eigenproblem at it."""
    res = map_hifi(problem, m0, tol, max_newton)
    eig = gen_eig_hifi(problem, res.m_map, r)
    eig.stats.update(res.stats)
    return eig
