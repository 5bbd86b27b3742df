import numpy as np
import pytest

from dspg.objective import QuadraticObjectives, make_quadratic_set

_ACCEPTANCE: list[str] = []


@pytest.fixture
def report():
    """Record one acceptance line; all lines are echoed at the end of the session."""

    def add(number: int, passed: bool, detail: str) -> None:
        _ACCEPTANCE.append(f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}")

    return add


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def identity2():
    return QuadraticObjectives([np.eye(2), np.eye(2)])


@pytest.fixture
def quad4():
    return make_quadratic_set(4, 0).objective_set()
