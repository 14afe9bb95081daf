import numpy as np
import pytest

from eqmaps.grid_geometry import make_grid


@pytest.fixture(scope="session")
def default_grid():
    return make_grid(1e-4, 1e4, 2048)


@pytest.fixture(scope="session")
def medium_grid():
    return make_grid(1e-3, 1e3, 1024)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion, echoed in the summary."""

    def record(number: int, passed: bool, detail: str) -> str:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        _ACCEPTANCE_LINES[number] = line
        print(line)
        return line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(_ACCEPTANCE_LINES[number])
