import numpy as np
import pytest

from losa.model import CalibBatch, make_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_stack():
    return make_synthetic(3, [6, 8, 8, 5], seed=7)


@pytest.fixture
def small_calib(rng):
    return CalibBatch(rng.standard_normal((20, 6)))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
