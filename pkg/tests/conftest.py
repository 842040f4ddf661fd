import dataclasses

import numpy as np
import pytest

from gridpinn.grid import Branch, Bus, BusKind, GridCase, load_case
from gridpinn.scenarios import BUILTIN_SCENARIOS, build_scenario

TWO_BUS_TEXT = """\
CASE two-bus
BASEMVA 100
BUS
1 SLACK 0 0 0 1.0 0 0
2 PQ 50 20 0 0 0 0
END
BRANCH
1 2 0 0.1 0 1
END
"""


@pytest.fixture
def two_bus_case():
    return GridCase(100.0, (Bus(1, BusKind.SLACK, voltage_setpoint=1.0), Bus(2, BusKind.PQ, 50.0, 20.0)),
                    (Branch(1, 2, 0.0, 0.1),), "two-bus")


@pytest.fixture(scope="session")
def ieee14():
    return load_case("ieee14")


@pytest.fixture(scope="session")
def ieee118():
    return load_case("ieee118")


@pytest.fixture(scope="session")
def small_s11():
    """S1.1 shrunk to a size that trains in well under a second."""
    spec = dataclasses.replace(BUILTIN_SCENARIOS["S1.1"], train_count=120, val_count=40, test_count=30)
    return build_scenario(spec)


@pytest.fixture(scope="session")
def small_s51():
    spec = dataclasses.replace(BUILTIN_SCENARIOS["S5.1"], train_count=120, val_count=40, test_count=100)
    return build_scenario(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
