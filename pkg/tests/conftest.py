"""Acceptance reporting: one PASS/FAIL line per numbered criterion."""
import pytest

_outcomes = {}
_details = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.fixture
def measured(request):
    """Record the measured quantity shown next to a criterion's verdict."""
    def note(text):
        _details[request.node.nodeid] = text
    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _outcomes[item.nodeid] = (mark.args[0], mark.args[1], rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (n, title, outcome) in sorted(_outcomes.items(), key=lambda kv: kv[1][0]):
        verdict = "PASS" if outcome == "passed" else "FAIL"
        detail = _details.get(nodeid, "")
        terminalreporter.write_line(f"[{verdict}] {n:2d}. {title}" + (f"  ({detail})" if detail else ""))
