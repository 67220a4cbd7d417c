import pytest

_VERDICTS = {}


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; printed at the end of the run."""

    def record(number, ok, detail):
        _VERDICTS[number] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        ok, detail = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
