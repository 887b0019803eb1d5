"""Acceptance reporting: one PASS/FAIL line per criterion in the terminal summary."""

import pytest

_DETAILS: dict[str, str] = {}
_OUTCOMES: dict[str, tuple[str, str]] = {}


@pytest.fixture
def report(request):
    """Attach a one-line measurement to the running acceptance test."""

    def note(text: str):
        _DETAILS[request.node.nodeid] = text

    return note


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        doc = _OUTCOMES.get(report.nodeid, ("", ""))[0]
        _OUTCOMES[report.nodeid] = (doc, "PASS" if report.passed else "FAIL")


def pytest_collection_modifyitems(items):
    for item in items:
        if "test_acceptance.py" in item.nodeid:
            title = (item.function.__doc__ or item.name).strip().splitlines()[0]
            _OUTCOMES[item.nodeid] = (title, "NOT RUN")


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (title, outcome) in _OUTCOMES.items():
        detail = _DETAILS.get(nodeid)
        terminalreporter.write_line(f"{outcome:7s} {title}" + (f" [{detail}]" if detail else ""))
