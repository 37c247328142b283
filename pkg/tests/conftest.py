import pytest

_RESULTS: dict[int, tuple[bool, str]] = {}


class AcceptanceLog:
    def record(self, number: int, ok: bool, detail: str):
        _RESULTS[number] = (bool(ok), detail)


@pytest.fixture
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        ok, detail = _RESULTS[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}")
