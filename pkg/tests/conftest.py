import numpy as np
import pytest

_CRITERIA = []


@pytest.fixture
def report_criterion():
    """Record one acceptance-criterion verdict; printed in the terminal summary."""

    def record(number, title, ok, detail):
        _CRITERIA.append((number, title, bool(ok), detail))
        print(f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
