"""Shared fixtures and the acceptance summary hook."""
from __future__ import annotations

import numpy as np
import pytest

from leraylab.grid import Domain
from leraylab.hoermander import HormanderSystem

# Lines appended by tests/test_acceptance.py, printed once at the end of the session.
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def torus64():
    return Domain.torus((64, 64))


@pytest.fixture(scope="session")
def torus32():
    return Domain.torus((32, 32))


@pytest.fixture(scope="session")
def classical():
    return HormanderSystem.classical(2, 0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
