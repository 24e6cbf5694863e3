import math

import numpy as np
import pytest

from commtraj.channel import ChannelParams, reference_ladder, quantize_expected_rate
from commtraj.dynamics import QuadrotorParams, build_linear_model

START = (75.0, 0.0)
GOAL = (80 * math.cos(5 * math.pi / 9), 80 * math.sin(5 * math.pi / 9))


@pytest.fixture(scope="session")
def params():
    return QuadrotorParams()


@pytest.fixture(scope="session")
def model(params):
    return build_linear_model(params)


@pytest.fixture(scope="session")
def chan():
    return ChannelParams()


@pytest.fixture(scope="session")
def ladder():
    return reference_ladder()


@pytest.fixture(scope="session")
def qmap6(chan, ladder):
    """Six-level map on the reference channel, radius 80 m."""
    return quantize_expected_rate(chan, ladder, 6, 80.0, rng=np.random.default_rng(0))


@pytest.fixture(scope="session")
def fast_sa():
    from commtraj.planner import SAConfig
    return SAConfig(iterations=300, n_init=10, polish_evals=200)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
