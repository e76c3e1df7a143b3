import math

import numpy as np
import pytest

from fdsqueeze.presets import preset

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def pos10():
    return preset("positive-10k")


@pytest.fixture
def neg10():
    return preset("negative-10k")


@pytest.fixture
def pos54():
    return preset("positive-54k")


def hz(x):
    return 2.0 * math.pi * np.asarray(x, dtype=float)
