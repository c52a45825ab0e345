from __future__ import annotations

import numpy as np
import pytest

from oprisk.envs import build_random_udag, build_toy_bandit, build_toy_chain
from oprisk.mdp import Dataset, Policy


@pytest.fixture
def bandit():
    return build_toy_bandit()


@pytest.fixture
def chain():
    return build_toy_chain()


@pytest.fixture
def udag():
    return build_random_udag(2, 2, 3, 2, seed=3)


@pytest.fixture
def bandit_pair(bandit):
    """Two toy-bandit trajectories, one per action, under a uniform behavior;
    the target always picks a1."""
    beta = Policy.uniform(1, 2)
    pi = Policy.deterministic([1], 2)
    data = Dataset([[0, 0], [0, 0]], [[0], [1]], [[0.0], [1.0]], beta)
    return data, pi


def random_policy(rng, S, A, floor=0.05):
    p = rng.dirichlet(np.ones(A), size=S) + floor
    return Policy(p / p.sum(1, keepdims=True))


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
