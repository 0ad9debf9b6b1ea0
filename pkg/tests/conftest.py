from __future__ import annotations

import numpy as np
import pytest

from stackelberg_lq import example_path, read_problem, solve_equilibrium
from stackelberg_lq.regime import Generator

RATES = np.array([[-0.5, 0.5], [0.7, -0.7]])


@pytest.fixture(scope="session")
def gen() -> Generator:
    return Generator.constant(RATES)


@pytest.fixture(scope="session")
def ex1():
    return read_problem(example_path("example1"))


@pytest.fixture(scope="session")
def ex2():
    return read_problem(example_path("example2"))


@pytest.fixture(scope="session")
def pol1(ex1):
    return solve_equilibrium(ex1)


@pytest.fixture(scope="session")
def pol2(ex2):
    return solve_equilibrium(ex2)


def sigma_exact(s):
    """Closed-form leader Riccati solution of the first example."""
    s = np.asarray(s, dtype=float)
    return (s - 1.0) / (s - 2.0)
