import pytest

_GATE_KEY = pytest.StashKey[list]()


@pytest.fixture
def gate(request):
    """Record one PASS/FAIL line per acceptance criterion; printed in the summary."""
    lines = request.config.stash.setdefault(_GATE_KEY, [])

    def report(number, ok, text):
        line = f"{'PASS' if ok else 'FAIL'} [{number:>2}] {text}"
        lines.append((number, line))
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_GATE_KEY, [])
    if lines:
        terminalreporter.section("acceptance gate")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
