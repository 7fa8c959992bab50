import pytest


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def criterion(request, capsys):
    """Record and print one PASS/FAIL line, then assert."""
    def report(label: str, ok: bool, detail: str = ""):
        line = f"criterion {label}: {'PASS' if ok else 'FAIL'} {detail}".rstrip()
        request.config.acceptance_lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)
