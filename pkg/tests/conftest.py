import pytest

_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record ``(criterion, passed, detail)`` lines for the terminal summary."""
    def record(number, name, passed, detail):
        line = f"ACCEPTANCE {number} {'PASS' if passed else 'FAIL'} {name}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
