import pytest


def pytest_configure(config):
    config.acceptance_lines = {}


@pytest.fixture
def record(request):
    """``record(n, ok, detail)`` stores one summary line for criterion ``n``."""
    def _record(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.acceptance_lines[n] = line
        print(line)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.acceptance_lines
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
