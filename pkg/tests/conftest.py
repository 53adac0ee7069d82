"""Collects the outcome of every ``@pytest.mark.criterion`` test and prints one
line per acceptance criterion at the end of the session."""

import pytest

_RESULTS = {}
_TITLES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and not report.failed):
        return
    number, title = mark.args
    _TITLES[number] = title
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    entry = _RESULTS.setdefault(number, {"ok": True, "details": []})
    entry["ok"] &= report.passed
    if detail:
        entry["details"].append(detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        entry = _RESULTS[number]
        status = "PASS" if entry["ok"] else "FAIL"
        line = f"criterion {number:>2} {status}  {_TITLES[number]}"
        if entry["details"]:
            line += "  [" + "; ".join(entry["details"]) + "]"
        terminalreporter.write_line(line)
