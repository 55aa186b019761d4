"""Dense closed-form Gaussian-linear inverse problem, used as ground truth.

Nothing here calls an iterative solver: MAP points come from one dense SPD
solve, eigenvalues from a dense generalized eigensolver, and the criteria
from log-determinants and traces of the dense posterior covariance.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import DimensionError, ParameterDomainError
from .forward import Design, LinearObservable
from .laplace import InverseProblem, gen_eig_hifi, map_hifi, noise_matrix, whitened_jacobian
from .reduce import ReducedBasis
from .reduced import ReducedMapProblem, eig_reduced, map_reduced
from .surrogate import LinearReducedMap, Surrogate

MAX_DIM = 512


class LinearProblem:
    """``y = G_xi m + b_xi + noise`` with a dense Gaussian prior.

    ``prior`` is a :class:`PriorModel` or a ``(mean, covariance)`` pair.
    """

    def __init__(self, G, prior, noise, design=None, b=None):
        self.G = np.asarray(G, dtype=float)
        d_s, d_m = self.G.shape
        if d_m > MAX_DIM:
            raise ParameterDomainError(f"dense oracle limited to d_m <= {MAX_DIM}, got {d_m}")
        if isinstance(prior, tuple):
            self.mean, self.cov = np.asarray(prior[0], float), np.asarray(prior[1], float)
        else:
            self.mean, self.cov = prior.mean.copy(), prior.dense_covariance()
        if self.cov.shape != (d_m, d_m):
            raise DimensionError("prior covariance does not match the map's column count")
        self.cov = 0.5 * (self.cov + self.cov.T)
        self.precision = np.linalg.inv(self.cov)
        self.precision = 0.5 * (self.precision + self.precision.T)
        self.design = Design(range(d_s) if design is None else design, d_s)
        idx = self.design.indices
        self.noise_cov = noise_matrix(noise, d_s)[np.ix_(idx, idx)] if (np.ndim(noise) == 0 or np.shape(noise)[0] == d_s) \
            else noise_matrix(noise, len(idx))
        self.b = np.zeros(d_s) if b is None else np.asarray(b, float)
        self.G_xi = self.G[idx]
        self.b_xi = self.b[idx]

    @property
    def d_m(self):
        return self.G.shape[1]

    def misfit_hessian(self):
        return self.G_xi.T @ np.linalg.solve(self.noise_cov, self.G_xi) if len(self.design) else np.zeros((self.d_m,) * 2)

    def posterior_cov(self):
        return np.linalg.inv(self.misfit_hessian() + self.precision)


def oracle_map(lp: LinearProblem, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    rhs = lp.precision @ lp.mean
    if len(lp.design):
        rhs = rhs + lp.G_xi.T @ np.linalg.solve(lp.noise_cov, y - lp.b_xi)
    return np.linalg.solve(lp.misfit_hessian() + lp.precision, rhs)


def oracle_eigs(lp: LinearProblem) -> np.ndarray:
    """Nonzero-rank part of ``H w = lambda Gamma^-1 w``, sorted nonincreasing (length ``r_s``)."""
    lam = sla.eigh(lp.misfit_hessian(), lp.precision, eigvals_only=True)[::-1]
    return np.clip(lam[: len(lp.design)], 0.0, None)


def oracle_criteria(lp: LinearProblem, y) -> dict:
    """Criteria from dense traces and log-determinants of the exact posterior."""
    post = lp.posterior_cov()
    d = lp.d_m
    m = oracle_map(lp, y)
    dm = m - lp.mean
    trace_term = d - np.trace(lp.precision @ post)
    logdet = np.linalg.slogdet(lp.cov)[1] - np.linalg.slogdet(post)[1]
    kl = 0.5 * (np.trace(lp.precision @ post) - d + dm @ lp.precision @ dm + logdet)
    return {"AOpt": float(trace_term), "DOpt": float(logdet), "EIG": float(2.0 * kl), "KL": float(kl), "m_map": m}


def oracle_expected_eig(lp: LinearProblem) -> float:
    """Expectation of the EIG criterion over data drawn from the prior predictive.

    The mean-shift term averages to the trace term, leaving ``log det``.
    """
    return float(np.linalg.slogdet(lp.cov)[1] - np.linalg.slogdet(lp.posterior_cov())[1])


def linear_inverse_problem(lp: LinearProblem, prior, y) -> InverseProblem:
    """The same problem expressed for the iterative high-fidelity solvers."""
    return InverseProblem(LinearObservable(lp.G, lp.b), prior, lp.design, y, lp.noise_cov)


def linear_surrogate(G, b, input_basis: ReducedBasis, output_basis: ReducedBasis) -> Surrogate:
    """Surrogate whose network is the exact reduced affine map of ``m -> G m + b``."""
    G = np.asarray(G, dtype=float)
    b = np.zeros(G.shape[0]) if b is None else np.asarray(b, dtype=float)
    Jr = output_basis.psi.T @ G @ input_basis.psi
    offset = output_basis.psi.T @ (G @ input_basis.center + b - output_basis.center)
    return Surrogate(input_basis, output_basis, LinearReducedMap(Jr, offset), {"kind": "linear"})


@dataclass
class ErrorBudget:
    eps1: float
    eps2: float
    eps3: float
    eps_m: float
    eps_lambda: float
    per_sample: dict = field(default_factory=dict)

    def medians(self) -> dict:
        return {k: float(np.median(v)) for k, v in self.per_sample.items()}


def _whitened_surrogate_jacobian(surrogate, prior, design, beta):
    """``d F_hat_xi / d eta`` for ``m = m_prior + A^-1 L_M eta``."""
    dbeta_deta = prior.sqrt_apply_T(surrogate.input_basis.dual).T
    return surrogate.output_basis.psi[design.indices] @ surrogate.net.jacobian(beta) @ dbeta_deta


def hessian_gap(S, S_hat) -> float:
    """``|S^T S - S_hat^T S_hat|_F`` evaluated in the span of both row spaces."""
    k = len(S)
    if k + len(S_hat) == 0:
        return 0.0
    _, R = np.linalg.qr(np.hstack([S.T, S_hat.T]))
    R1, R2 = R[:, :k], R[:, k:]
    return float(np.linalg.norm(R1 @ R1.T - R2 @ R2.T))


def budget_sample(problem: InverseProblem, surrogate: Surrogate, hifi=None, reduced=None, warmstart=None) -> dict:
    """All budget quantities for one ``(y, design)``.

    ``hifi`` / ``reduced`` are optional precomputed Laplace results; missing
    ones are solved here.
    """
    prior = problem.prior
    if hifi is None:
        hifi = map_hifi(problem)
    if reduced is None:
        rp = ReducedMapProblem(surrogate, problem.design, problem.y, problem.noise_cov)
        reduced = map_reduced(rp, warmstart=warmstart)
    m_star, m_hat = hifi.m_map, reduced.m_map
    beta_hat = surrogate.input_basis.encode(m_hat)
    beta_star = surrogate.input_basis.encode(m_star)
    idx = problem.design.indices
    Linv = sla.solve_triangular(problem.noise_chol, np.eye(problem.r_s), lower=True) if problem.r_s else np.zeros((0, 0))

    eps1, eps2 = 0.0, 0.0
    for m, beta in ((m_star, beta_star), (m_hat, beta_hat)):
        lin = problem.pto.linearize(m)
        F_hat = surrogate.output_basis.decode(surrogate.net.forward(beta))
        eps1 = max(eps1, float(np.linalg.norm(lin.F[idx] - F_hat[idx])))
        Jw = prior.sqrt_apply_T(lin.vjp(problem.scatter(np.eye(problem.r_s)))).T if problem.r_s else np.zeros((0, prior.dim))
        Jw_hat = _whitened_surrogate_jacobian(surrogate, prior, problem.design, beta)
        eps2 = max(eps2, float(np.linalg.norm(Jw - Jw_hat)))
    eta2 = prior.norm2(m_star - prior.mean)
    eps3 = float(np.sqrt(max(eta2 - beta_star @ beta_star, 0.0)))
    eps_m = float(np.sqrt(prior.norm2(m_star - m_hat)))

    S = whitened_jacobian(problem, problem.pto.linearize(m_star))
    S_hat = Linv @ _whitened_surrogate_jacobian(surrogate, prior, problem.design, beta_hat)
    lam = np.linalg.svd(S, compute_uv=False) ** 2 if problem.r_s else np.zeros(0)
    rp = ReducedMapProblem(surrogate, problem.design, problem.y, problem.noise_cov)
    lam_hat = eig_reduced(rp, beta_hat).eigvals
    r = max(len(lam), 1)
    lam = np.pad(lam, (0, max(0, r - len(lam))))[:r]
    lam_hat = np.pad(lam_hat, (0, max(0, r - len(lam_hat))))[:r]
    gaps = np.abs(lam - lam_hat)
    hgap = hessian_gap(S, S_hat)
    a = np.sum(lam / (1 + lam))
    a_hat = np.sum(lam_hat / (1 + lam_hat))
    d = np.sum(np.log1p(lam))
    d_hat = np.sum(np.log1p(lam_hat))
    return {
        "eps1": eps1, "eps2": eps2, "eps3": eps3, "eps_m": eps_m,
        "eps_lambda": float(gaps.max()), "hessian_gap": hgap,
        "weyl_ok": bool(np.all(gaps <= hgap * (1 + 1e-10) + 1e-12)),
        "a_gap": float(abs(a - a_hat)), "d_gap": float(abs(d - d_hat)),
        "criteria_ok": bool(abs(a - a_hat) <= r * gaps.max() + 1e-12 and abs(d - d_hat) <= r * gaps.max() + 1e-12),
        "rank": r,
    }


def measure_error_budget(problems, surrogate: Surrogate, hifi=None, reduced=None, warmstart=None) -> ErrorBudget:
    """Sup over samples of the budget quantities; per-sample values kept for medians."""
    problems = list(problems)
    hifi = hifi or [None] * len(problems)
    reduced = reduced or [None] * len(problems)
    rows = [budget_sample(p, surrogate, h, r, warmstart) for p, h, r in zip(problems, hifi, reduced)]
    keys = ("eps1", "eps2", "eps3", "eps_m", "eps_lambda")
    per = {k: np.array([row[k] for row in rows]) for k in rows[0]} if rows else {}
    sup = {k: float(per[k].max()) if rows else 0.0 for k in keys}
    return ErrorBudget(**sup, per_sample=per)


def write_budget_csv(path, rows):
    """``rows`` are (training_size, seed, ErrorBudget) triples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["training_size", "seed", "eps1", "eps2", "eps3", "eps_m", "eps_lambda"])
        for size, seed, b in rows:
            w.writerow([size, seed] + [repr(float(getattr(b, k))) for k in ("eps1", "eps2", "eps3", "eps_m", "eps_lambda")])
