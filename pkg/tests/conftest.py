import pytest

# criterion number -> (name, ok, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def acceptance():
    def record(number: int, name: str, ok: bool, detail: str) -> None:
        ACCEPTANCE[number] = (name, bool(ok), detail)
        assert ok, f"criterion {number} ({name}): {detail}"

    return record


def format_line(number: int, name: str, ok: bool, detail: str) -> str:
    return f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(format_line(number, *ACCEPTANCE[number]))
