import pytest

ACCEPTANCE: dict = {}


@pytest.fixture
def record():
    """Record one acceptance line; the summary is printed at the end of the session."""
    def _record(key: str, ok: bool, detail: str) -> None:
        ACCEPTANCE[key] = (ok, detail)
        print(f"[{'PASS' if ok else 'FAIL'}] {key}: {detail}")
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0][2:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key}: {detail}")
