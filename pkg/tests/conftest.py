import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion and print it at once."""

    def record(number: int, name: str, ok: bool, detail: str) -> bool:
        line = f"CRITERION {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _VERDICTS.append(line)
        reporter = request.config.pluginmanager.get_plugin("terminalreporter")
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
