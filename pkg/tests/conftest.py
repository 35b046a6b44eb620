"""Shared test configuration.

All numeric tests run with BLAS pinned to one thread so reductions use a
fixed order and results are bitwise reproducible run to run.
"""

import pytest
from threadpoolctl import threadpool_limits

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session", autouse=True)
def single_thread_blas():
    with threadpool_limits(limits=1):
        yield


@pytest.fixture(scope="session")
def criterion():
    """Records one PASS/FAIL line per acceptance criterion for the summary."""

    def record(number: int, name: str, ok) -> bool:
        status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
        line = f"criterion {number:2d} {name}: {status}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok is True

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
