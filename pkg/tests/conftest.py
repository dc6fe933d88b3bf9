import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    def report(number: int, title: str, passed: bool, detail: str):
        ACCEPTANCE_LINES.append((number, f"criterion {number} {'PASS' if passed else 'FAIL'}  {title}: {detail}"))
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
