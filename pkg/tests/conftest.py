import pytest

CRITERIA = {}


@pytest.fixture
def criterion():
    """Record the outcome of a numbered acceptance criterion: ``criterion(n, ok, detail)``."""
    def record(number, ok, detail):
        CRITERIA.setdefault(number, []).append((bool(ok), detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        for ok, detail in CRITERIA[number]:
            terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
