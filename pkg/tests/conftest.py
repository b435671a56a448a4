import pytest

_LINES: list[tuple[str, bool, str]] = []


@pytest.fixture
def record():
    """Register one summary line per acceptance criterion."""

    def add(label: str, passed: bool, detail: str = ""):
        _LINES.append((label, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'} {label}  {detail}")

    return add


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in sorted(_LINES, key=lambda x: int(x[0].split()[1].rstrip(":"))):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}  {detail}")
