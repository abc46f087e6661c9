import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one acceptance line; the line is printed in the terminal summary."""

    def record(number, ok, detail):
        _VERDICTS.append((number, bool(ok), detail))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(_VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
