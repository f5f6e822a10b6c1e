import numpy as np
import pytest

from ppmlab.diffusion import VpSchedule
from ppmlab.problems import GaussianMixture, LinearGaussianProblem, LinearOperator


@pytest.fixture
def sched():
    return VpSchedule()


@pytest.fixture
def conjugate():
    """Prior N(0, 1), F = 1, y = 2, sigma_y = 1; posterior N(1, 1/2)."""
    prior = GaussianMixture.gaussian([0.0], [[1.0]])
    return prior, LinearGaussianProblem(LinearOperator.dense([[1.0]]), [2.0], 1.0)


@pytest.fixture
def bimodal():
    """Two-mode 2D prior seen through one projection; posterior weights ~ (0.30, 0.70)."""
    prior = GaussianMixture([0.5, 0.5], [[0.5, 4.0], [3.5, 4.0]], 0.5)
    return prior, LinearGaussianProblem(LinearOperator.dense([[0.5, 1.0]]), [5.5], 0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for the terminal summary; returns the verdict."""

    def record(number, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        request.config.stash[_ACCEPTANCE].append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
