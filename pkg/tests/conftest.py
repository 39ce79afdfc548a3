import pytest

_RESULTS = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record a one-line verdict for an acceptance criterion.

    Usage: ``acceptance(3, passed, "detail")``. Lines are printed in the
    terminal summary whether or not output capture is on.
    """
    lines = request.config.stash.setdefault(_RESULTS, [])

    def record(number, passed, detail=""):
        lines.append((number, "PASS" if passed else "FAIL", detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_RESULTS, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, verdict, detail in sorted(lines, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {detail}")
