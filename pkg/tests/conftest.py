import pytest

ACCEPTANCE: dict = {}


@pytest.fixture
def verdict():
    """Record one line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, passed: bool, detail: str):
        ACCEPTANCE[number] = (passed, detail)
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
