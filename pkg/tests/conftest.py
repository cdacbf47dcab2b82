import numpy as np
import pytest

from levybsde.levy import JumpComponent, LevyModel


@pytest.fixture
def jump_model():
    """sigma = 1 with +-1 jumps at intensity 1 each."""
    return LevyModel(0.0, 1.0, (JumpComponent.symmetric(2.0),), 1.0)


@pytest.fixture
def brownian_model():
    return LevyModel(0.0, 1.0, (), 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def zscore(samples, target):
    samples = np.asarray(samples, dtype=float)
    se = samples.std(ddof=1) / np.sqrt(samples.size)
    return abs(samples.mean() - target) / se


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULT_LINES
    except ImportError:
        return
    if RESULT_LINES:
        terminalreporter.section("acceptance criteria")
        for line in RESULT_LINES:
            terminalreporter.write_line(line)
