import numpy as np
import pytest

from oed_dino.oracle import LinearProblem
from oed_dino.prior import build_prior


def make_linear(n=6, d_s=8, design=(1, 4, 6), sigma=0.1, seed=0, prior=None):
    """Random linear map with a Matern prior, plus one data draw for ``design``."""
    prior = prior or build_prior(n, 0.1, 0.5)
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((d_s, prior.dim)) / np.sqrt(prior.dim)
    b = rng.standard_normal(d_s)
    lp = LinearProblem(G, prior, sigma, list(design), b)
    y = lp.G_xi @ prior.sample(seed, 500) + lp.b_xi + sigma * rng.standard_normal(len(design))
    return prior, lp, y


@pytest.fixture(scope="session")
def linear6():
    return make_linear()


_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion and assert it."""
    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        _ACCEPTANCE.append((number, line))
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
