import warnings

import numpy as np
import pytest

from conftest import make_linear
from oed_dino.criteria import a_opt, d_opt, eig_gain
from oed_dino.errors import ParameterDomainError
from oed_dino.laplace import laplace_hifi
from oed_dino.oracle import (
    MAX_DIM, LinearProblem, hessian_gap, linear_inverse_problem, linear_surrogate, measure_error_budget,
    oracle_criteria, oracle_eigs, oracle_expected_eig, oracle_map, write_budget_csv,
)
from oed_dino.reduce import RankTruncationWarning, compute_dis, compute_pca


def test_zero_map_gives_prior_mean():
    mean = np.array([1.0, -2.0, 0.5])
    lp = LinearProblem(np.zeros((2, 3)), (mean, np.eye(3)), 0.1)
    np.testing.assert_allclose(oracle_map(lp, np.array([3.0, 4.0])), mean)


def test_uninformative_noise_limit(linear6):
    prior, lp, y = linear6
    huge = LinearProblem(lp.G, prior, lp.noise_cov * 1e12, lp.design, lp.b)
    m = oracle_map(huge, y)
    assert np.sqrt(prior.norm2(m - prior.mean)) / np.sqrt(prior.norm2(oracle_map(lp, y) - prior.mean)) < 1e-4


def test_identity_example():
    lp = LinearProblem(np.eye(2), (np.zeros(2), np.eye(2)), 1.0)
    np.testing.assert_allclose(oracle_eigs(lp), [1.0, 1.0])
    c = oracle_criteria(lp, np.zeros(2))
    assert abs(c["AOpt"] - 1.0) < 1e-14
    assert abs(c["DOpt"] - 2 * np.log(2)) < 1e-14


def test_criteria_invariant_under_data_rotation(linear6):
    prior, lp, y = linear6
    Q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((3, 3)))
    rot = LinearProblem(Q @ lp.G_xi, prior, Q @ lp.noise_cov @ Q.T, None, Q @ lp.b_xi)
    a, b = oracle_criteria(lp, y), oracle_criteria(rot, Q @ y)
    for k in ("AOpt", "DOpt", "EIG"):
        assert abs(a[k] - b[k]) / abs(a[k]) < 1e-10


def test_oracle_matches_laplace_pipeline(linear6):
    prior, lp, y = linear6
    res = laplace_hifi(linear_inverse_problem(lp, prior, y))
    c = oracle_criteria(lp, y)
    assert abs(a_opt(res.eigvals) - c["AOpt"]) / c["AOpt"] < 1e-8
    assert abs(d_opt(res.eigvals) - c["DOpt"]) / c["DOpt"] < 1e-8
    assert abs(eig_gain(res.eigvals, res.m_map, prior) - c["EIG"]) / c["EIG"] < 1e-8


def test_criteria_identities(linear6):
    prior, lp, y = linear6
    c = oracle_criteria(lp, y)
    dm = c["m_map"] - lp.mean
    assert abs(c["EIG"] - (c["DOpt"] - c["AOpt"] + dm @ lp.precision @ dm)) < 1e-12 * abs(c["EIG"])
    assert abs(c["EIG"] - 2 * c["KL"]) < 1e-12 * abs(c["EIG"])


def test_expected_eig_equals_log_det(linear6):
    prior, lp, _ = linear6
    assert abs(oracle_expected_eig(lp) - oracle_criteria(lp, np.zeros(3))["DOpt"]) < 1e-12


def test_dimension_limit():
    with pytest.raises(ParameterDomainError):
        LinearProblem(np.zeros((2, MAX_DIM + 1)), (np.zeros(MAX_DIM + 1), np.eye(MAX_DIM + 1)), 1.0)


def test_hessian_gap_matches_direct():
    rng = np.random.default_rng(1)
    S, T = rng.standard_normal((3, 30)), rng.standard_normal((4, 30))
    direct = np.linalg.norm(S.T @ S - T.T @ T)
    assert abs(hessian_gap(S, T) - direct) / direct < 1e-12


def _budget_problems(prior, lp, k, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(k):
        design = sorted(rng.choice(lp.G.shape[0], 3, replace=False).tolist())
        lpk = LinearProblem(lp.G, prior, 0.1, design, lp.b)
        y = lpk.G_xi @ prior.sample(seed, 900 + i) + lpk.b_xi + 0.1 * rng.standard_normal(3)
        out.append(linear_inverse_problem(lpk, prior, y))
    return out


def test_exact_surrogate_has_zero_budget():
    prior, lp, _ = make_linear(n=4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankTruncationWarning)
        ib = compute_dis(prior, lp.G[None], prior.dim, complete=True)
    F = np.stack([lp.G @ prior.sample(2, i) + lp.b for i in range(30)])
    sur = linear_surrogate(lp.G, lp.b, ib, compute_pca(F, lp.G.shape[0]))
    budget = measure_error_budget(_budget_problems(prior, lp, 3), sur)
    assert budget.eps1 < 1e-12 and budget.eps2 < 1e-12 and budget.eps3 < 1e-6
    assert budget.eps_lambda < 1e-10 * max(1.0, np.max(budget.per_sample["rank"]))


def test_weyl_and_criterion_bounds_for_truncated_surrogate(tmp_path):
    prior, lp, _ = make_linear()
    ib = compute_dis(prior, lp.G[None], 3)
    F = np.stack([lp.G @ prior.sample(2, i) + lp.b for i in range(30)])
    sur = linear_surrogate(lp.G, lp.b, ib, compute_pca(F, 4))
    budget = measure_error_budget(_budget_problems(prior, lp, 10, seed=1), sur)
    assert budget.eps_lambda > 0
    assert np.all(budget.per_sample["weyl_ok"]) and np.all(budget.per_sample["criteria_ok"])
    assert np.all(budget.per_sample["eps_lambda"] <= budget.per_sample["hessian_gap"] * (1 + 1e-10) + 1e-12)
    write_budget_csv(tmp_path / "b.csv", [(64, 0, budget)])
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "training_size,seed,eps1,eps2,eps3,eps_m,eps_lambda" and len(lines) == 2
