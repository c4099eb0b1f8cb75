import pytest

_DETAILS = {}
_OUTCOMES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def report(request):
    """``report(text)`` attaches measured values to the criterion's summary line."""
    marker = request.node.get_closest_marker("criterion")

    def record(text):
        _DETAILS.setdefault(marker.args[0], []).append(text)

    return record


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None and (rep.when == "call" or rep.failed):
        n = marker.args[0]
        _OUTCOMES[n] = _OUTCOMES.get(n, True) and rep.passed
    return rep


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        status = "PASS" if _OUTCOMES[n] else "FAIL"
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {'; '.join(_DETAILS.get(n, []))}")
