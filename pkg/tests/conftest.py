"""Shared fixtures and small helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from farebench.dataset import ColumnTable

HEADER = "pickup_datetime,pickup_longitude,pickup_latitude,dropoff_longitude,dropoff_latitude,passenger_count,fare_amount\n"


def trip_line(i: int, fare: float | str = 7.5, lat: float | str = 40.75) -> str:
    return f"2015-03-0{1 + i % 9} 1{i % 10}:00:00 UTC,-73.98,{lat},-73.95,40.77,{1 + i % 4},{fare}\n"


def write_csv(path, lines: list[str], header: str = HEADER):
    path.write_text(header + "".join(lines))
    return path


def random_table(rng: np.random.Generator, n: int, names=("a", "b", "c")) -> ColumnTable:
    return ColumnTable.from_arrays({c: rng.normal(size=n) for c in names})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary ---------------------------------------------------------

CRITERIA_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    """Print one PASS/FAIL line now and again in the terminal summary."""
    line = f"CRITERION {number} {'PASS' if passed else 'FAIL'}: {title} ({detail})"
    CRITERIA_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
