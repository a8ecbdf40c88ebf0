import functools

import numpy as np
import pytest

from etcest.lin_gauss import example_system, solve_riccati
from etcest.mdp_solver import MdpConfig, build_mdp, value_iteration


@pytest.fixture(scope="session")
def model():
    return example_system()


@pytest.fixture(scope="session")
def steady(model):
    return solve_riccati(model)


@functools.lru_cache(maxsize=None)
def _solve(kappa, M=6, zeta=0.1, alpha=0.999, delta_max=10.0, tol=1e-6):
    m = example_system()
    st = solve_riccati(m)
    mdp = build_mdp(MdpConfig(M=M, zeta=zeta, delta_max=delta_max, alpha=alpha, kappa=kappa), st, m.A)
    return mdp, value_iteration(mdp, tol=tol)


@pytest.fixture(scope="session")
def solve():
    """Cached ``(MdpModel, ValueIterationResult)`` for the benchmark plant."""
    return _solve


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
