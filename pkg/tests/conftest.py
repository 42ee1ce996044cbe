import pytest

_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    def record(criterion: str, passed: bool, detail: str) -> None:
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
