import pytest

N_CRITERIA = 10
_RESULTS = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, ok, detail)`` returns ``ok``."""

    def record(n: int, ok: bool, detail: str) -> bool:
        _RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(_RESULTS.get(n, f"criterion {n:2d}: NOT RUN  (deselected, or errored before measuring)"))
