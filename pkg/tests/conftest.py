import pytest


def pytest_configure(config):
    config._criteria = []


@pytest.fixture
def criterion(request):
    """``criterion(n, title, ok, detail)`` logs one PASS/FAIL line and returns ``ok``."""
    lines = request.config._criteria

    def record(n: int, title: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {n:>2}  {title}: {detail}"
        lines.append((n, line))
        print(line)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, config):
    if config._criteria:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(config._criteria):
            terminalreporter.write_line(line)
