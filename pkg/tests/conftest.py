import numpy as np
import pytest

from skelscan.tensor import Tape, precision

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def f64():
    with precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tape():
    with Tape() as t:
        yield t
    t.clear()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
