import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record():
    """Collects a one-line verdict per acceptance criterion for the terminal summary."""
    def _record(criterion: str, passed: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"{criterion:4s} {'PASS' if passed else 'FAIL'}  {detail}")
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
