import warnings

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from oed_dino.errors import DimensionError, ParameterDomainError
from oed_dino.forward import LINEAR_DIFFUSION, ForwardModel, LinearObservable, PDEObservable, SensorGrid, sensor_layout
from oed_dino.prior import build_prior
from oed_dino.reduce import (
    RankTruncationWarning, SampleBank, compute_dis, compute_dos, compute_kle, compute_pca, decode_input,
    decode_output, encode_input, encode_output, generate_bank, projection_errors, randomized_eigh,
)


@pytest.fixture(scope="module")
def prior8():
    return build_prior(8, 0.1, 0.5)


@pytest.fixture(scope="module")
def jac8(prior8):
    rng = np.random.default_rng(0)
    return rng.standard_normal((3, 10, prior8.dim))


def _prior_orthonormal(basis, prior):
    G = prior.dense_precision()
    return np.max(np.abs(basis.psi.T @ G @ basis.psi - np.eye(basis.rank)))


def test_dis_single_jacobian_matches_dense(prior8):
    J = np.random.default_rng(1).standard_normal((10, prior8.dim))
    b = compute_dis(prior8, J, 10)
    S = prior8.sqrt_apply_T(J.T).T
    ref = np.linalg.eigvalsh(S.T @ S)[::-1][:10]
    assert np.max(np.abs(b.values - ref) / ref) < 1e-10
    assert _prior_orthonormal(b, prior8) < 1e-8


def test_dis_matches_unwhitened_generalized_problem(prior8, jac8):
    b = compute_dis(prior8, jac8, 12)
    H = np.mean([J.T @ J for J in jac8], axis=0)
    ref = sla.eigh(H, prior8.dense_precision(), eigvals_only=True)[::-1][:12]
    assert np.max(np.abs(b.values - ref) / ref) < 1e-9


def test_dis_zero_jacobian(prior8):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankTruncationWarning)
        b = compute_dis(prior8, np.zeros((1, 4, prior8.dim)), 3, complete=True)
    assert np.all(b.values == 0)


def test_dis_rank_truncation_warns(prior8):
    J = np.random.default_rng(2).standard_normal((1, 4, prior8.dim))
    with pytest.warns(RankTruncationWarning):
        b = compute_dis(prior8, J, 9)
    assert b.rank == 4 and b.truncated


def test_dis_randomized_route_matches_dense(prior8, monkeypatch):
    # Gram rank 12 is within r + oversampling, so the range finder captures it exactly
    J = np.random.default_rng(13).standard_normal((2, 6, prior8.dim))
    dense = compute_dis(prior8, J, 6)
    import oed_dino.reduce as red
    monkeypatch.setattr(red, "DENSE_LIMIT", 10)
    rand = compute_dis(prior8, J, 6)
    assert np.max(np.abs(rand.values - dense.values) / dense.values) < 1e-8


def test_randomized_eigh_on_low_rank():
    rng = np.random.default_rng(3)
    Q, _ = np.linalg.qr(rng.standard_normal((40, 5)))
    A = Q @ np.diag([5.0, 4, 3, 2, 1]) @ Q.T
    lam, V = randomized_eigh(lambda X: A @ X, 40, 5)
    np.testing.assert_allclose(lam, [5, 4, 3, 2, 1], rtol=1e-10)


def test_kle_matches_dense_covariance(prior8):
    b = compute_kle(prior8, 10)
    G = prior8.dense_covariance()
    ref = np.linalg.eigvalsh(G)[::-1][:10]
    assert np.max(np.abs(b.values - ref) / ref) < 1e-9
    assert np.all(np.diff(b.values) <= 0)
    assert _prior_orthonormal(b, prior8) < 1e-8


def test_kle_first_mode_mirror_symmetric():
    # the ne/nw meshes are mirror images, so the first mode maps onto itself under x -> 1 - x
    p_ne = build_prior(8, 0.1, 0.5, diagonal="ne")
    p_nw = build_prior(8, 0.1, 0.5, diagonal="nw")
    perm = p_ne.mesh.mirror_permutation()
    a = compute_kle(p_ne, 1).psi[:, 0]
    b = compute_kle(p_nw, 1).psi[perm, 0]
    assert min(np.max(np.abs(a - b)), np.max(np.abs(a + b))) < 1e-6


def test_pca_examples():
    F = np.tile(np.arange(5.0), (6, 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert np.all(compute_pca(F, 3).values == 0)
    F = np.random.default_rng(4).standard_normal((6, 9))
    b = compute_pca(F, 5)
    np.testing.assert_allclose(b.project(F), F, rtol=1e-10, atol=1e-10)
    assert np.max(np.abs(b.psi.T @ b.psi - np.eye(5))) < 1e-8


def test_pca_truncates_above_min_dimension():
    with pytest.warns(RankTruncationWarning):
        assert compute_pca(np.random.default_rng(0).standard_normal((3, 8)), 5).rank == 3


def test_pca_is_optimal_against_random_bases():
    rng = np.random.default_rng(5)
    F = rng.standard_normal((40, 12)) @ np.diag(np.linspace(3, 0.1, 12))
    b = compute_pca(F, 4)
    best = np.linalg.norm(F - b.project(F))
    C = F - F.mean(axis=0)
    for _ in range(10):
        Q, _ = np.linalg.qr(rng.standard_normal((12, 4)))
        assert best <= np.linalg.norm(C - C @ Q @ Q.T) + 1e-12


def test_dos_examples(prior8):
    u = np.random.default_rng(6).standard_normal(7)
    v = np.random.default_rng(7).standard_normal(prior8.dim)
    b = compute_dos(prior8, np.outer(u, v)[None], 7)
    assert np.sum(b.values > 1e-10 * b.values[0]) == 1
    J = np.random.default_rng(8).standard_normal((2, 7, prior8.dim))
    b = compute_dos(prior8, J, 7)
    G = prior8.dense_covariance()
    ref = np.linalg.eigvalsh(np.mean([Jn @ G @ Jn.T for Jn in J], axis=0))[::-1]
    assert np.max(np.abs(b.values - ref) / ref) < 1e-10
    assert np.all(b.values >= 0)


def test_encode_decode_input(prior8, jac8):
    b = compute_dis(prior8, jac8, 12)
    np.testing.assert_array_equal(encode_input(b, prior8.mean), np.zeros(12))
    beta = np.random.default_rng(9).standard_normal(12)
    assert np.max(np.abs(encode_input(b, decode_input(b, beta)) - beta)) < 1e-10
    with pytest.raises(ParameterDomainError):
        encode_output(b, np.zeros(prior8.dim))


def test_encode_decode_output():
    F = np.random.default_rng(10).standard_normal((20, 8))
    b = compute_pca(F, 5)
    np.testing.assert_allclose(encode_output(b, b.center), 0.0, atol=1e-14)
    beta = np.random.default_rng(11).standard_normal(5)
    assert np.max(np.abs(encode_output(b, decode_output(b, beta)) - beta)) < 1e-10
    with pytest.raises(DimensionError):
        b.encode(np.zeros(3))


def test_input_projection_error_nonincreasing(prior8, jac8):
    b = compute_dis(prior8, jac8, 30)
    m = prior8.sample(0, 0)
    errs = [prior8.norm2(m - b.truncate(r).project(m)) for r in range(1, 31)]
    assert np.all(np.diff(errs) <= 1e-10)


def test_full_basis_projection_errors_vanish(prior8):
    G = np.random.default_rng(12).standard_normal((6, prior8.dim))
    pto = LinearObservable(G)
    bank = generate_bank(prior8, pto, 0, 4, jacobians=True)
    b = compute_kle(prior8, prior8.dim)
    rep = projection_errors(bank, b, pto)
    assert rep["observable"] < 1e-10 and rep["jacobian"] < 1e-10
    rep = projection_errors(bank, compute_pca(bank.observables, 4))
    assert rep["observable"] < 1e-10


def test_projection_errors_nonincreasing_in_rank(prior8, jac8):
    bank = SampleBank(np.zeros((3, prior8.dim)), np.ones((3, 10)), np.arange(3), jacobians=jac8)
    b = compute_dis(prior8, jac8, 25)
    errs = [projection_errors(bank, b.truncate(r))["jacobian"] for r in (5, 10, 15, 20, 25)]
    assert np.all(np.diff(errs) <= 1e-12)


def test_bank_rows_must_agree():
    with pytest.raises(DimensionError):
        SampleBank(np.zeros((3, 4)), np.zeros((2, 5)), np.arange(3))


def test_bank_generation_counts_and_parallel_determinism(prior8):
    sensors = SensorGrid(prior8.mesh, sensor_layout("lower", 10))
    pto = PDEObservable(ForwardModel(LINEAR_DIFFUSION, prior8.mesh), sensors)
    serial = generate_bank(prior8, pto, 7, 6)
    assert serial.state_solves == 6
    pto2 = PDEObservable(ForwardModel(LINEAR_DIFFUSION, prior8.mesh), sensors)
    parallel = generate_bank(prior8, pto2, 7, 6, workers=3)
    assert serial.observables.tobytes() == parallel.observables.tobytes()
    b_in = compute_kle(prior8, 5)
    b_out = compute_pca(serial.observables, 4)
    red = generate_bank(prior8, pto, 7, 6, bases=(b_in, b_out))
    assert red.linearized_solves == 6 * 4
    assert red.reduced_jacobians.shape == (6, 4, 5)


@pytest.mark.slow
def test_dis_beats_kle_on_jacobian_projection():
    prior = build_prior(16, 0.1, 0.5)
    sensors = SensorGrid(prior.mesh, sensor_layout("lower", 50))
    pto = PDEObservable(ForwardModel(LINEAR_DIFFUSION, prior.mesh), sensors)
    train = generate_bank(prior, pto, 0, 64, jacobians=True)
    test = generate_bank(prior, pto, 0, 50, start=1000, jacobians=True)
    dis = compute_dis(prior, train.jacobians, 32)
    kle = compute_kle(prior, 32)
    assert projection_errors(test, dis)["jacobian"] <= projection_errors(test, kle)["jacobian"]


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31))
def test_truncation_is_nested(r, seed):
    prior = build_prior(4, 0.1, 0.5)
    J = np.random.default_rng(seed).standard_normal((2, 6, prior.dim))
    full = compute_dis(prior, J, 12)
    sub = full.truncate(r)
    np.testing.assert_array_equal(sub.psi, full.psi[:, :r])
