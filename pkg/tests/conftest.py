from __future__ import annotations

import numpy as np
import pytest

from relstab import bundled, sysfile

ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def ex16():
    return sysfile.load_text(bundled.EX16).system


@pytest.fixture(scope="session")
def so3_osc():
    return sysfile.load_text(bundled.SO3_OSCILLATOR).system


@pytest.fixture(scope="session")
def trivial():
    return sysfile.load_text(bundled.TRIVIAL_OSCILLATOR).system


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
