"""A-, D- and EIG-optimality under sample average approximation, and swapping greedy."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NonConvergenceError, NumericalValidityError, ParameterDomainError
from .forward import Design
from .laplace import InverseProblem, laplace_hifi, noise_matrix
from .prior import PriorModel, sample_rng
from .reduced import LbfgsConfig, ReducedMapProblem, laplace_reduced

log = logging.getLogger(__name__)

AOPT, DOPT, EIG = "AOpt", "DOpt", "EIG"
KINDS = (AOPT, DOPT, EIG)
NEG_TOL = 1e-10
NOISE_STREAM = 2
SAA_STREAM = 3


def _eigvals(eigvals):
    lam = np.asarray(eigvals, dtype=float).ravel()
    if lam.size and lam.min() < -NEG_TOL:
        raise NumericalValidityError(f"negative eigenvalue {lam.min():.3e}")
    return np.clip(lam, 0.0, None)


def a_opt(eigvals) -> float:
    lam = _eigvals(eigvals)
    return float(np.sum(lam / (1.0 + lam)))


def a_opt_weighted(eigvals, eigvecs) -> float:
    """``trace(W D W^T)``: the posterior variance reduction in nodal coordinates."""
    lam = _eigvals(eigvals)
    return float(np.sum(lam / (1.0 + lam) * np.sum(np.asarray(eigvecs) ** 2, axis=0)))


def d_opt(eigvals) -> float:
    return float(np.sum(np.log1p(_eigvals(eigvals))))


def eig_gain(eigvals, m_map, prior: PriorModel) -> float:
    """``sum log(1+l) - sum l/(1+l) + |m_map - m_prior|^2`` in the prior precision norm."""
    return d_opt(eigvals) - a_opt(eigvals) + prior.norm2(np.asarray(m_map) - prior.mean)


@dataclass
class CriterionValue:
    kind: str
    value: float
    per_sample: np.ndarray
    backend: str
    failures: int = 0
    stats: dict = field(default_factory=dict)


@dataclass
class SaaBank:
    """Prior samples, candidate-wide noise draws and observables shared by all designs."""

    parameters: np.ndarray
    noise: np.ndarray
    observables: np.ndarray
    noise_cov: np.ndarray
    seed: int

    def __len__(self):
        return len(self.parameters)

    def data(self, n: int, design) -> np.ndarray:
        idx = design.indices if isinstance(design, Design) else np.asarray(design, dtype=int)
        return self.observables[n, idx] + self.noise[n, idx]


def build_saa_bank(prior: PriorModel, pto, noise, n: int, seed: int, workers: int = 1) -> SaaBank:
    """Draw ``n`` (m, noise) pairs; observables are evaluated at every candidate sensor."""
    C = noise_matrix(noise, pto.d_s)
    L = np.linalg.cholesky(C)
    params = np.stack([prior.color(sample_rng(seed, i, SAA_STREAM).standard_normal(prior.dim)) for i in range(n)])
    eps = np.stack([L @ sample_rng(seed, i, NOISE_STREAM).standard_normal(pto.d_s) for i in range(n)])
    F = _ordered_map(pto.observables, list(params), workers)
    return SaaBank(params, eps, np.stack(F), C, int(seed))


def _ordered_map(fn, items, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


class HifiBackend:
    name = "HiFi"

    def __init__(self, pto, prior: PriorModel, a_opt_mode: str = "simplified", tol: float = 1e-8, max_newton: int = 50):
        self.pto, self.prior, self.a_opt_mode = pto, prior, a_opt_mode
        self.tol, self.max_newton = tol, max_newton

    def laplace(self, y, design, noise_cov):
        problem = InverseProblem(self.pto, self.prior, design, y, noise_cov)
        return laplace_hifi(problem, tol=self.tol, max_newton=self.max_newton)


class SurrogateBackend:
    name = "Surrogate"

    def __init__(self, surrogate, prior: PriorModel, a_opt_mode: str = "simplified",
                 warmstart=None, lbfgs_config: LbfgsConfig | None = None):
        self.surrogate, self.prior, self.a_opt_mode = surrogate, prior, a_opt_mode
        self.warmstart = warmstart
        self.lbfgs_config = lbfgs_config

    def laplace(self, y, design, noise_cov):
        problem = ReducedMapProblem(self.surrogate, design, y, noise_cov, self.lbfgs_config)
        return laplace_reduced(problem, self.warmstart)


def criterion_from_laplace(kind: str, res, prior: PriorModel, a_opt_mode: str = "simplified") -> float:
    if kind == AOPT:
        return a_opt_weighted(res.eigvals, res.eigvecs) if a_opt_mode == "weighted" else a_opt(res.eigvals)
    if kind == DOPT:
        return d_opt(res.eigvals)
    if kind == EIG:
        return eig_gain(res.eigvals, res.m_map, prior)
    raise ParameterDomainError(f"unknown criterion {kind!r}")


def per_sample_laplace(bank: SaaBank, design, backend, workers: int = 1):
    """Laplace results for every bank sample; failed samples give ``None``."""
    design = design if isinstance(design, Design) else Design(design, bank.observables.shape[1])

    def one(n):
        try:
            return backend.laplace(bank.data(n, design), design, bank.noise_cov)
        except (NonConvergenceError, NumericalValidityError, np.linalg.LinAlgError) as exc:
            log.warning("sample %d failed for design %s: %s", n, design.selected, exc)
            return None

    return _ordered_map(one, range(len(bank)), workers)


def expected_criterion(bank: SaaBank, design, kind: str, backend, workers: int = 1) -> CriterionValue:
    if kind not in KINDS:
        raise ParameterDomainError(f"unknown criterion {kind!r}; expected one of {KINDS}")
    results = per_sample_laplace(bank, design, backend, workers)
    values = np.array([np.nan if r is None else criterion_from_laplace(kind, r, backend.prior, backend.a_opt_mode)
                       for r in results])
    failed = int(np.isnan(values).sum())
    if failed > 0.1 * len(values):
        raise NonConvergenceError(f"{failed} of {len(values)} SAA samples failed", residual=failed)
    ok = values[~np.isnan(values)]
    value = float(np.sum(ok) / len(ok)) if len(ok) else 0.0
    return CriterionValue(kind, value, values, backend.name, failed)


@dataclass
class GreedyResult:
    design: Design
    value: float
    trace: list
    evaluations: int


def swapping_greedy_objective(objective, d_s: int, r_s: int, k_max: int = 3, eps_min: float = 0.01,
                              workers: int = 1) -> GreedyResult:
    """Greedy sensor addition followed by swap sweeps, maximizing ``objective(Design)``.

    Each trace row is ``(step, phase, candidate, criterion, accepted)``.
    """
    if not 0 <= r_s <= d_s:
        raise ParameterDomainError(f"need 0 <= r_s <= d_s, got r_s={r_s}, d_s={d_s}")
    cache = {}

    def evaluate_all(designs):
        todo = [d for d in designs if tuple(sorted(d.selected)) not in cache]
        for d, v in zip(todo, _ordered_map(objective, todo, workers)):
            cache[tuple(sorted(d.selected))] = float(v)
        return [cache[tuple(sorted(d.selected))] for d in designs]

    def pick(cands, values):
        best = max(values)
        return min(c for c, v in zip(cands, values) if v == best), best

    trace = []
    selected = []
    value = 0.0
    step = 0
    for _ in range(r_s):
        step += 1
        cands = [s for s in range(d_s) if s not in selected]
        values = evaluate_all([Design(selected + [s]) for s in cands])
        choice, value = pick(cands, values)
        trace += [(step, "greedy", c, v, c == choice) for c, v in zip(cands, values)]
        selected.append(choice)

    for _ in range(k_max if r_s else 0):
        before = value
        for t in range(r_s):
            step += 1
            incumbent = selected[t]
            cands = sorted([incumbent] + [s for s in range(d_s) if s not in selected])
            designs = [Design(selected[:t] + [c] + selected[t + 1:]) for c in cands]
            values = evaluate_all(designs)
            choice, value = pick(cands, values)
            trace += [(step, "swap", c, v, c == choice) for c, v in zip(cands, values)]
            selected[t] = choice
        if value - before <= eps_min:
            break
    return GreedyResult(Design(selected), value, trace, len(cache))


def swapping_greedy(bank: SaaBank, kind: str, backend, d_s: int, r_s: int, k_max: int = 3,
                    eps_min: float = 0.01, workers: int = 1) -> GreedyResult:
    """Swapping greedy on the SAA criterion; candidate designs are evaluated in parallel."""
    return swapping_greedy_objective(
        lambda d: expected_criterion(bank, d, kind, backend).value, d_s, r_s, k_max, eps_min, workers
    )


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "phase", "candidate", "criterion", "accepted"])
        for step, phase, cand, val, acc in trace:
            w.writerow([step, phase, cand, repr(float(val)), "true" if acc else "false"])
