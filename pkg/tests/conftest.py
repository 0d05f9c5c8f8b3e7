import numpy as np
import pytest

from kpzlab.potentials import Potential


@pytest.fixture(scope="session")
def quad():
    return Potential.quadratic()


@pytest.fixture(scope="session")
def pert():
    return Potential.perturbed(1.0, 0.3, "sine")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
