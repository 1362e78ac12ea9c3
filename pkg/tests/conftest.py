import pytest

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def report(request):
    """Record the one-line verdict of an acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def _report(number, passed, text):
        lines[number] = f"criterion {number:>2d}: {'PASS' if passed else 'FAIL'} - {text}"
        print(lines[number])

    return _report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines):
        terminalreporter.write_line(lines[number])
