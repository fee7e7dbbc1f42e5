import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    """Record a one-line outcome for an exit criterion; printed after the run."""
    def record(criterion, ok, detail):
        _VERDICTS.append((criterion, ok, detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in sorted(_VERDICTS):
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
