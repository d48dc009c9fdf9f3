import pytest

_REPORT: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record one result line per acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _REPORT[number] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_REPORT):
        ok, detail = _REPORT[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
