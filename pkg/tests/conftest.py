import numpy as np
import pytest

from delibopt.gridworld import build_four_rooms
from delibopt.mdp import chain2
from delibopt.options import Theta


@pytest.fixture(scope="session")
def four_rooms():
    return build_four_rooms()


@pytest.fixture(scope="session")
def four_rooms_theta(four_rooms):
    return Theta.random(four_rooms.n_states, four_rooms.n_actions, 4,
                        np.random.default_rng(2024), epsilon_mu=0.1)


@pytest.fixture
def chain():
    return chain2()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
