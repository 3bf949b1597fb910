import numpy as np
import pytest

from conical_flow.geometry import REFERENCE, RadialGrid
from conical_flow.verification import VerificationContext

# criterion number -> CriterionResult, filled by test_acceptance
ACCEPTANCE_RESULTS = {}


@pytest.fixture(scope="session")
def ctx():
    """Desk-scale verification context (L = 30, n = 2048, beta = 1/2)."""
    return VerificationContext()


@pytest.fixture(scope="session")
def geom():
    return REFERENCE


@pytest.fixture(scope="session")
def desk_grid():
    return RadialGrid(30.0, 2048)


@pytest.fixture(scope="session")
def small_grid():
    return RadialGrid(20.0, 256)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[number].line())
