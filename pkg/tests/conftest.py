import pytest

_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``record(label, ok, detail)`` prints one PASS/FAIL line and asserts ``ok``."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def record(label: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
