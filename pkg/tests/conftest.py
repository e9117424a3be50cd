"""Per-criterion PASS/FAIL summary for tests marked ``criterion(n, title)``."""
from collections import defaultdict

import pytest

_OUTCOMES = defaultdict(list)
_TITLES = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    _TITLES[number] = title
    if report.when == "call" or (report.when == "setup" and not report.passed):
        note = ""
        if hasattr(report, "wasxfail"):
            status, note = "xfail", report.wasxfail
        elif report.skipped:
            status = "skipped"
        else:
            status = "passed" if report.passed else "failed"
        _OUTCOMES[number].append((item.name, status, note))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        results = _OUTCOMES[number]
        ok = all(status == "passed" for _, status, _ in results)
        terminalreporter.write_line(f"C{number} {'PASS' if ok else 'FAIL'}  {_TITLES[number]}")
        for name, status, note in results:
            if status != "passed":
                terminalreporter.write_line(f"    {name}: {status}{' - ' + note if note else ''}")
