import numpy as np
import pytest

from ddcpi.model import bus_model, solve_ccp_fixed_point

ALPHA = np.array([1.0, 0.05])
THETA_F = np.array([0.25])


@pytest.fixture(scope="session")
def bus():
    return bus_model()


@pytest.fixture(scope="session")
def bus0():
    """Bus model with mileage counted from zero, as in the shipped configs."""
    return bus_model(mileage_origin=0.0)


@pytest.fixture(scope="session")
def p_star(bus):
    return solve_ccp_fixed_point(bus, ALPHA, THETA_F)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
