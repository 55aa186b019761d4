"""Self-checks run by ``oed-dino verify``: oracle agreement, derivatives, SMW, Weyl, monotonicity.

Every check is deterministic in the seed so repeated runs produce identical reports.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .criteria import a_opt, d_opt, eig_gain, swapping_greedy_objective
from .forward import (
    KINDS, Design, ForwardModel, PDEObservable, SensorGrid, jacobian_full, sensor_layout,
)
from .laplace import gen_eig_hifi, map_hifi
from .oracle import (
    LinearProblem, budget_sample, linear_inverse_problem, linear_surrogate, oracle_criteria, oracle_eigs, oracle_map,
)
from .prior import build_prior, sample_rng
from .reduce import compute_dis, compute_pca
from .surrogate import ResNet


@dataclass
class Check:
    name: str
    value: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.tol)


def _rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def _linear_case(seed, n=6, d_s=8, design=(1, 4, 6), sigma=0.1):
    prior = build_prior(n, 0.1, 0.5)
    rng = sample_rng(seed, 0, 7)
    G = rng.standard_normal((d_s, prior.dim)) / np.sqrt(prior.dim)
    b = rng.standard_normal(d_s)
    lp = LinearProblem(G, prior, sigma, list(design), b)
    y = lp.G_xi @ prior.sample(seed, 1000) + lp.b_xi + sigma * rng.standard_normal(len(design))
    return prior, lp, y


def check_oracle(seed) -> list:
    prior, lp, y = _linear_case(seed)
    ip = linear_inverse_problem(lp, prior, y)
    res = map_hifi(ip)
    eig = gen_eig_hifi(ip, res.m_map)
    oc = oracle_criteria(lp, y)
    return [
        Check("oracle.map", _rel(res.m_map, oracle_map(lp, y)), 1e-8),
        Check("oracle.eigs", _rel(eig.eigvals, oracle_eigs(lp)), 1e-8),
        Check("oracle.aopt", _rel(a_opt(eig.eigvals), oc["AOpt"]), 1e-8),
        Check("oracle.dopt", _rel(d_opt(eig.eigvals), oc["DOpt"]), 1e-8),
        Check("oracle.eig", _rel(eig_gain(eig.eigvals, res.m_map, prior), oc["EIG"]), 1e-8),
    ]


def check_jacobians(seed, n=8, directions=5) -> list:
    prior = build_prior(n, 0.1, 0.5)
    sensors = SensorGrid(prior.mesh, sensor_layout("lower", 12))
    out = []
    for kind in KINDS:
        pto = PDEObservable(ForwardModel(kind, prior.mesh), sensors)
        m = prior.sample(seed, 0)
        J = jacobian_full(pto.model, pto.model.solve(m), sensors)
        rng = sample_rng(seed, 1, 7)
        worst = 0.0
        for _ in range(directions):
            v = rng.standard_normal(prior.dim)
            fd = (pto.observables(m + 1e-5 * v) - pto.observables(m - 1e-5 * v)) / 2e-5
            worst = max(worst, _rel(J @ v, fd))
        out.append(Check(f"fd.{kind}", worst, 1e-5))
    return out


def check_smw(seed, d=12) -> list:
    rng = sample_rng(seed, 2, 7)
    V, _ = np.linalg.qr(rng.standard_normal((d, d)))
    lam = np.sort(rng.exponential(3.0, d))[::-1]
    lhs = np.linalg.inv(np.eye(d) + V @ np.diag(lam) @ V.T)
    rhs = np.eye(d) - V @ np.diag(lam / (1 + lam)) @ V.T
    return [Check("smw.identity", float(np.linalg.norm(lhs - rhs)), 1e-12)]


def check_weyl(seed, draws=5) -> list:
    """Truncated-basis linear surrogate against the exact model: Weyl and criterion bounds."""
    prior, lp, _ = _linear_case(seed)
    F = np.stack([lp.G @ prior.sample(seed, 2000 + i) + lp.b for i in range(40)])
    ib = compute_dis(prior, lp.G[None], 4)
    ob = compute_pca(F, 5)
    sur = linear_surrogate(lp.G, lp.b, ib, ob)
    rng = sample_rng(seed, 3, 7)
    weyl, criteria = 0.0, 0.0
    for k in range(draws):
        design = Design(sorted(rng.choice(lp.G.shape[0], 3, replace=False).tolist()))
        lpk = LinearProblem(lp.G, prior, 0.1, design, lp.b)
        y = lpk.G_xi @ prior.sample(seed, 3000 + k) + lpk.b_xi + 0.1 * rng.standard_normal(3)
        row = budget_sample(linear_inverse_problem(lpk, prior, y), sur)
        weyl = max(weyl, 0.0 if row["weyl_ok"] else 1.0)
        criteria = max(criteria, 0.0 if row["criteria_ok"] else 1.0)
    return [Check("weyl.bound_violations", weyl, 0.0), Check("criteria.bound_violations", criteria, 0.0)]


def check_monotonicity(seed) -> list:
    prior, lp, _ = _linear_case(seed)
    d_s = lp.G.shape[0]

    def dopt(design):
        return d_opt(oracle_eigs(LinearProblem(lp.G, prior, 0.1, design, lp.b)))

    res = swapping_greedy_objective(dopt, d_s, 2)
    accepted = [row[3] for row in res.trace if row[4]]
    drops = float(max([0.0] + [a - b for a, b in zip(accepted, accepted[1:])]))
    # adding a sensor never reduces log det
    worst = 0.0
    for s in range(d_s):
        base = [t for t in range(d_s) if t != s][:3]
        worst = max(worst, dopt(Design(base)) - dopt(Design(base + [s])))
    # nested input bases project no worse as the rank grows
    ib = compute_dis(prior, lp.G[None], d_s)
    m = prior.sample(seed, 4000)
    errs = [prior.norm2(m - ib.truncate(r).project(m)) for r in range(1, d_s + 1)]
    nested = float(max([0.0] + [b - a for a, b in zip(errs, errs[1:])]))
    return [
        Check("greedy.trace_drop", drops, 1e-12),
        Check("dopt.added_sensor_drop", max(worst, 0.0), 1e-12),
        Check("basis.nested_increase", nested, 1e-10),
    ]


def check_network(seed) -> list:
    rng = sample_rng(seed, 5, 7)
    net = ResNet(3, 4, 5, 1)
    for k, s in net.shapes().items():
        net.params[k] = rng.standard_normal(s)
    bm, bF, J = rng.standard_normal((6, 3)), rng.standard_normal((6, 4)), rng.standard_normal((6, 4, 3))
    _, grads = net.loss_and_grad(bm, bF, J, 1.0)
    g = np.concatenate([v.ravel() for v in grads.values()])
    theta = net.flat()
    worst = 0.0
    for i in rng.choice(len(theta), 20, replace=False):
        t = theta.copy()
        t[i] += 1e-5
        net.set_flat(t)
        up = net.loss_and_grad(bm, bF, J, 1.0)[0]
        t[i] -= 2e-5
        net.set_flat(t)
        dn = net.loss_and_grad(bm, bF, J, 1.0)[0]
        net.set_flat(theta)
        worst = max(worst, abs((up - dn) / 2e-5 - g[i]) / max(abs(g[i]), 1e-6))
    return [Check("net.loss_gradient_fd", worst, 1e-5)]


def run_all(seed: int = 0) -> list:
    checks = []
    for suite in (check_oracle, check_jacobians, check_smw, check_weyl, check_monotonicity, check_network):
        checks += suite(seed)
    return checks
