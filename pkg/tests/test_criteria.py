import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_linear
from oed_dino.criteria import (
    AOPT, DOPT, EIG, HifiBackend, a_opt, a_opt_weighted, build_saa_bank, d_opt, eig_gain, expected_criterion,
    swapping_greedy, swapping_greedy_objective, write_trace_csv,
)
from oed_dino.errors import NumericalValidityError, ParameterDomainError
from oed_dino.forward import Design, LinearObservable
from oed_dino.oracle import LinearProblem, oracle_expected_eig


def test_closed_form_examples():
    assert a_opt([]) == 0.0 and d_opt([]) == 0.0
    assert a_opt([1.0]) == 0.5
    assert a_opt([3.0, 1.0]) == 1.25
    assert d_opt([0.0, 0.0]) == 0.0
    assert abs(d_opt([np.e - 1]) - 1.0) < 1e-15


def test_eig_gain_at_prior_mean(linear6):
    prior, _, _ = linear6
    assert abs(eig_gain([1.0], prior.mean, prior) - (np.log(2) - 0.5)) < 1e-15


def test_negative_eigenvalue_rejected():
    for fn in (a_opt, d_opt):
        with pytest.raises(NumericalValidityError):
            fn([1.0, -1e-3])
    assert d_opt([1.0, -1e-12]) == d_opt([1.0, 0.0])


def test_weighted_a_opt_with_unit_columns():
    lam = np.array([2.0, 0.5])
    assert abs(a_opt_weighted(lam, np.eye(4)[:, :2]) - a_opt(lam)) < 1e-15


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1e3), max_size=8), st.floats(0, 1e3))
def test_criteria_increase_with_an_extra_eigenvalue(lam, extra):
    assert a_opt(lam + [extra]) >= a_opt(lam)
    assert d_opt(lam + [extra]) >= d_opt(lam)
    assert d_opt(lam) >= a_opt(lam) - 1e-12


@pytest.fixture(scope="module")
def linear_bank():
    prior, lp, _ = make_linear(d_s=8)
    pto = LinearObservable(lp.G, lp.b)
    return prior, lp, pto


def test_empty_design_criterion_is_zero(linear_bank):
    prior, _, pto = linear_bank
    bank = build_saa_bank(prior, pto, 0.1, 4, seed=1)
    for kind in (AOPT, DOPT):
        assert expected_criterion(bank, Design([], 8), kind, HifiBackend(pto, prior)).value == 0.0


def test_unknown_criterion(linear_bank):
    prior, _, pto = linear_bank
    bank = build_saa_bank(prior, pto, 0.1, 2, seed=1)
    with pytest.raises(ParameterDomainError):
        expected_criterion(bank, Design([0]), "BOpt", HifiBackend(pto, prior))


def test_saa_bank_independent_of_worker_count(linear_bank):
    prior, _, pto = linear_bank
    a = build_saa_bank(prior, pto, 0.1, 6, seed=3, workers=1)
    b = build_saa_bank(prior, pto, 0.1, 6, seed=3, workers=4)
    assert a.parameters.tobytes() == b.parameters.tobytes() and a.noise.tobytes() == b.noise.tobytes()
    back = HifiBackend(pto, prior)
    va = expected_criterion(a, [1, 5], EIG, back, workers=1).per_sample
    vb = expected_criterion(b, [1, 5], EIG, back, workers=3).per_sample
    assert va.tobytes() == vb.tobytes()


def test_monte_carlo_eig_matches_log_det(linear_bank):
    prior, lp, pto = linear_bank
    design = [1, 4, 6]
    bank = build_saa_bank(prior, pto, 0.1, 512, seed=7, workers=4)
    v = expected_criterion(bank, design, EIG, HifiBackend(pto, prior), workers=4)
    ref = oracle_expected_eig(LinearProblem(lp.G, prior, 0.1, design, lp.b))
    se = np.std(v.per_sample, ddof=1) / np.sqrt(len(v.per_sample))
    assert abs(v.value - ref) <= 3 * se


def _oracle_dopt(G, prior, sigma=0.1):
    def objective(design):
        if not design.selected:
            return 0.0
        return oracle_expected_eig(LinearProblem(G, prior, sigma, design.selected))
    return objective


def test_greedy_close_to_exhaustive():
    for seed in range(3):
        prior, lp, _ = make_linear(d_s=8, seed=seed)
        obj = _oracle_dopt(lp.G, prior)
        res = swapping_greedy_objective(obj, 8, 2)
        best = max(obj(Design(list(c))) for c in itertools.combinations(range(8), 2))
        assert res.value >= 0.95 * best


def test_greedy_trace_and_information_monotonicity(tmp_path):
    prior, lp, _ = make_linear(d_s=6, design=(1, 4), seed=2)
    obj = _oracle_dopt(lp.G, prior)
    res = swapping_greedy_objective(obj, 6, 3)
    assert len(res.design.selected) == 3 and len(set(res.design.selected)) == 3
    greedy_best = [v for _, ph, _, v, acc in res.trace if ph == "greedy" and acc]
    assert np.all(np.diff(greedy_best) >= 0)
    swaps = [v for _, ph, _, v, acc in res.trace if ph == "swap" and acc]
    assert all(s >= greedy_best[-1] - 1e-12 for s in swaps)
    for r in range(5):
        base = list(range(r))
        assert obj(Design(base + [5])) >= obj(Design(base)) - 1e-12
    write_trace_csv(tmp_path / "t.csv", res.trace)
    rows = (tmp_path / "t.csv").read_text().splitlines()
    assert rows[0] == "step,phase,candidate,criterion,accepted" and len(rows) == len(res.trace) + 1


def test_greedy_argument_checks():
    with pytest.raises(ParameterDomainError):
        swapping_greedy_objective(lambda d: 0.0, 3, 4)
    assert swapping_greedy_objective(lambda d: 0.0, 3, 0).design.selected == ()


def test_greedy_on_saa_bank_picks_informative_sensor(linear_bank):
    prior, lp, pto = linear_bank
    G = lp.G.copy()
    G[3] *= 20.0
    pto = LinearObservable(G, lp.b)
    bank = build_saa_bank(prior, pto, 0.1, 4, seed=0)
    res = swapping_greedy(bank, DOPT, HifiBackend(pto, prior), 8, 1, k_max=1)
    assert res.design.selected == (3,)
