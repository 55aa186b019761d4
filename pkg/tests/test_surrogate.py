import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oed_dino.errors import DimensionError, ParameterDomainError
from oed_dino.forward import Design, restrict
from oed_dino.prior import build_prior
from oed_dino.reduce import compute_kle, compute_pca
from oed_dino.surrogate import (
    DEFAULT_EPOCHS, ResNet, Surrogate, TrainBatch, TrainConfig, loss, net_forward, net_jacobian, surrogate_forward,
    surrogate_jacobian_full, train,
)


def random_net(seed, r_in=3, r_out=4, width=5, n_resnet=1, scale=1.0):
    rng = np.random.default_rng(seed)
    net = ResNet(r_in, r_out, width, n_resnet)
    for k, s in net.shapes().items():
        net.params[k] = scale * rng.standard_normal(s)
    return net


def _plain_loss(net, bm, bF):
    out = np.stack([net.forward(b) for b in bm])
    return np.mean(np.sum((bF - out) ** 2, axis=1))


def test_zero_network():
    net = ResNet(3, 4, 6, 2)
    np.testing.assert_array_equal(net_forward(net, np.ones(3)), np.zeros(4))
    np.testing.assert_array_equal(net_jacobian(net, np.ones(3)), np.zeros((4, 3)))


def test_zero_residual_weights_leave_adapters():
    net = random_net(0, n_resnet=2)
    beta = np.array([0.3, -0.2, 0.5])
    for l in range(2):
        net.params[f"W_{l}"][:] = 0
    p = net.params
    z = np.tanh(p["Z_in"] @ beta + p["b_in"])
    np.testing.assert_allclose(net_forward(net, beta), p["Z_out"] @ np.tanh(z) + p["b_out"], rtol=1e-14)


def test_batched_equals_per_sample():
    net = random_net(1, n_resnet=2)
    B = np.random.default_rng(2).standard_normal((7, 3))
    batched = net_forward(net, B)
    loop = np.stack([net_forward(net, b) for b in B])
    assert np.max(np.abs(batched - loop)) < 1e-14


@pytest.mark.parametrize("seed", range(5))
def test_jacobian_matches_central_differences(seed):
    net = random_net(seed, n_resnet=2)
    beta = np.random.default_rng(seed + 10).standard_normal(3)
    J = net_jacobian(net, beta)
    assert J.shape == (4, 3)
    fd = np.column_stack([
        (net_forward(net, beta + 1e-5 * e) - net_forward(net, beta - 1e-5 * e)) / 2e-5 for e in np.eye(3)
    ])
    assert np.linalg.norm(J - fd) / np.linalg.norm(fd) < 1e-6


def test_loss_zero_when_data_reproduced():
    net = random_net(3)
    bm = np.random.default_rng(4).standard_normal((5, 3))
    out, jac = net.forward_and_jacobian(bm)
    assert loss(net, TrainBatch(bm, out, jac), 1.0)[0] == 0.0


def test_regression_loss_matches_independent_path():
    net = random_net(5)
    rng = np.random.default_rng(6)
    bm, bF = rng.standard_normal((6, 3)), rng.standard_normal((6, 4))
    value, _ = loss(net, TrainBatch(bm, bF, None), 0.0)
    ref = _plain_loss(net, bm, bF)
    assert abs(value - ref) / ref < 1e-12


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([0.0, 1.0, 0.3]))
def test_loss_gradient_matches_central_differences(seed, lam):
    net = random_net(seed)
    rng = np.random.default_rng(seed + 1)
    bm, bF, J = rng.standard_normal((6, 3)), rng.standard_normal((6, 4)), rng.standard_normal((6, 4, 3))
    _, grads = net.loss_and_grad(bm, bF, J, lam)
    g = np.concatenate([v.ravel() for v in grads.values()])
    theta = net.flat()
    for i in rng.choice(len(theta), 20, replace=False):
        t = theta.copy()
        t[i] += 1e-5
        net.set_flat(t)
        up = net.loss_and_grad(bm, bF, J, lam)[0]
        t[i] -= 2e-5
        net.set_flat(t)
        dn = net.loss_and_grad(bm, bF, J, lam)[0]
        net.set_flat(theta)
        fd = (up - dn) / 2e-5
        assert abs(fd - g[i]) <= 1e-5 * max(abs(g[i]), 1e-3)


def test_parameter_shapes_checked():
    with pytest.raises(DimensionError):
        ResNet(2, 2, 3, 1, params={"Z_in": np.zeros((3, 3))})
    with pytest.raises(ParameterDomainError):
        ResNet(0, 2)


def _toy_data(n=64, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((4, 3)) * 0.5
    bm = rng.standard_normal((n, 3))
    bF = np.tanh(bm @ A.T)
    J = (1 - bF**2)[:, :, None] * A[None]
    return TrainBatch(bm, bF, J)


@pytest.fixture(scope="module")
def bases():
    prior = build_prior(4, 0.1, 0.5)
    ib = compute_kle(prior, 3)
    ob = compute_pca(np.random.default_rng(0).standard_normal((20, 4)), 4)
    return prior, ib, ob


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_training_reduces_loss(bases, seed):
    _, ib, ob = bases
    s = train(_toy_data(), ib, ob, TrainConfig(epochs=5, width=8, n_resnet=1, seed=seed))
    curve = s.meta["loss_curve"]
    assert curve[-1] <= curve[0]
    assert set(s.meta["holdout"]) == {"output", "jacobian"}


def test_training_is_deterministic(bases):
    _, ib, ob = bases
    cfg = TrainConfig(epochs=2, width=8, n_resnet=1, seed=4)
    a, b = train(_toy_data(), ib, ob, cfg), train(_toy_data(), ib, ob, cfg)
    assert a.net.flat().tobytes() == b.net.flat().tobytes()


def test_jacobian_training_requires_jacobians(bases):
    _, ib, ob = bases
    data = _toy_data()
    with pytest.raises(DimensionError):
        train(TrainBatch(data.beta_m, data.beta_F, None), ib, ob, TrainConfig(epochs=1, lambda_jac=1.0))


def test_default_epochs():
    assert DEFAULT_EPOCHS[("linear_diffusion", True)] == 100
    assert DEFAULT_EPOCHS[("semilinear_reaction", True)] == 200


def test_surrogate_forward_and_full_jacobian(bases):
    prior, ib, ob = bases
    s = Surrogate(ib, ob, random_net(7, 3, 4, 5, 1, scale=0.5))
    np.testing.assert_allclose(surrogate_forward(s, prior.mean), ob.decode(s.net.forward(np.zeros(3))), rtol=1e-14)
    m = prior.sample(0, 0)
    J = surrogate_jacobian_full(s, m)
    v = np.random.default_rng(8).standard_normal(prior.dim)
    fd = (surrogate_forward(s, m + 1e-5 * v) - surrogate_forward(s, m - 1e-5 * v)) / 2e-5
    assert np.linalg.norm(J @ v - fd) / np.linalg.norm(fd) < 1e-5
    d = Design([3, 1])
    np.testing.assert_allclose(
        restrict(surrogate_forward(s, m), d), ob.center[d.indices] + ob.psi[d.indices] @ s.net.forward(ib.encode(m)),
        atol=1e-14,
    )


def test_surrogate_dimension_mismatch(bases):
    _, ib, ob = bases
    with pytest.raises(DimensionError):
        Surrogate(ib, ob, ResNet(2, 4, 5, 1))
