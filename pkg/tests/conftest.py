import sys

import numpy as np
import pytest

from plfo.mdp import TabularMdp, TabularPolicy


def random_mdp(rng: np.random.Generator, n_states: int = 3, n_actions: int = 2, gamma: float | None = None,
               r_max: float = 1.0) -> TabularMdp:
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    R = rng.uniform(0.0, r_max, size=(n_states, n_states))
    d0 = rng.dirichlet(np.ones(n_states))
    g = rng.uniform(0.0, 0.95) if gamma is None else gamma
    return TabularMdp(P, R, gamma=g, initial_dist=d0, r_max=r_max)


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> TabularPolicy:
    return TabularPolicy(rng.dirichlet(np.ones(n_actions), size=n_states))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        passed, detail = results[n]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {n}: {detail}")
