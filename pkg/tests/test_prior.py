import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oed_dino.errors import DimensionError, ParameterDomainError
from oed_dino.mesh import Mesh2D
from oed_dino.prior import build_prior, prior_inner, prior_norm2, sample_prior


@pytest.fixture(scope="module")
def p4():
    return build_prior(4, 0.1, 0.5)


@pytest.fixture(scope="module")
def p8():
    return build_prior(8, 0.1, 0.5)


def test_dimension_at_production_mesh():
    assert Mesh2D(64).node_count == 4225


@pytest.mark.parametrize("n", [2, 5, 9])
def test_constant_in_kernel_of_gradient(n):
    prior = build_prior(n, 0.3, 0.7)
    one = np.ones(prior.dim)
    A1, M1 = prior.A @ one, prior.M @ one
    assert np.max(np.abs(A1 - 0.7 * M1) / np.abs(0.7 * M1)) < 1e-12


def test_mass_matrix_n2():
    mesh = Mesh2D(2)
    prior = build_prior(2, 0.1, 0.5)
    assert abs(prior.M.sum() - 1.0) < 1e-14
    area = np.zeros(mesh.node_count)
    for cell in mesh.cells:
        area[cell] += 0.5 * mesh.h**2
    np.testing.assert_allclose(np.asarray(prior.M.sum(axis=1)).ravel(), area / 3.0, rtol=1e-13)


def test_zero_noise_gives_mean():
    mean = np.linspace(-1, 1, 25)
    prior = build_prior(4, 0.1, 0.5, mean=mean)
    np.testing.assert_array_equal(prior.color(np.zeros(prior.dim)), mean)


def test_sample_covariance_matches_dense(p4):
    X = np.stack([p4.sample(3, i) for i in range(10000)])
    C = np.cov(X.T)
    G = p4.dense_covariance()
    assert np.linalg.norm(C - G) / np.linalg.norm(G) < 0.1


def test_samples_are_reproducible(p8):
    a, b = sample_prior(p8, 11, 4), sample_prior(p8, 11, 4)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, sample_prior(p8, 11, 5))


def test_dense_covariance_is_AinvMAinv(p4):
    A, M = p4.A.toarray(), p4.M.toarray()
    Ainv = np.linalg.inv(A)
    np.testing.assert_allclose(p4.dense_covariance(), Ainv @ M @ Ainv, rtol=1e-10, atol=1e-12)


def test_inner_examples(p4):
    z = np.zeros(p4.dim)
    assert prior_inner(p4, z, z) == 0.0
    assert abs(prior_norm2(p4, np.ones(p4.dim)) - 0.25) < 1e-12


def test_inner_matches_dense_precision(p4):
    u = np.random.default_rng(0).standard_normal(p4.dim)
    ref = u @ np.linalg.solve(p4.dense_covariance(), u)
    assert abs(prior_norm2(p4, u) - ref) / ref < 1e-10


def test_inner_dimension_mismatch(p4):
    with pytest.raises(DimensionError):
        prior_inner(p4, np.zeros(3), np.zeros(3))


@pytest.mark.parametrize("gamma,kappa", [(0.0, 1.0), (1.0, -1.0)])
def test_rejects_nonpositive_coefficients(gamma, kappa):
    with pytest.raises(ParameterDomainError):
        build_prior(4, gamma, kappa)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 2**31))
def test_inner_symmetric_and_positive(s1, s2):
    prior = build_prior(4, 0.1, 0.5)
    u = np.random.default_rng(s1).standard_normal(prior.dim)
    v = np.random.default_rng(s2).standard_normal(prior.dim)
    scale = np.sqrt(prior.norm2(u) * prior.norm2(v))
    assert abs(prior.inner(u, v) - prior.inner(v, u)) < 1e-12 * scale
    assert prior.norm2(u) > 0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_whitening_is_isometry(seed):
    prior = build_prior(8, 0.1, 0.5)
    eta = np.random.default_rng(seed).standard_normal(prior.dim)
    m = prior.color(eta)
    assert abs(prior.norm2(m - prior.mean) - eta @ eta) / (eta @ eta) < 1e-10
    np.testing.assert_allclose(prior.whiten(m), eta, rtol=1e-8, atol=1e-8)


def test_dense_covariance_spectrum(p8):
    lam = np.linalg.eigvalsh(p8.dense_covariance())[::-1]
    assert lam.min() > 0
    assert np.all(np.diff(lam) <= 0)
