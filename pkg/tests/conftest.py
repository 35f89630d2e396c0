"""Shared pytest hooks: a one-line PASS/FAIL summary per acceptance criterion."""

import pytest

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _ACCEPTANCE.setdefault(number, {"title": title, "passed": True, "ran": False, "detail": ""})
    if report.when == "call" or report.failed:
        entry["ran"] = True
        if report.failed:
            entry["passed"] = False
            entry["detail"] = report.longreprtext.strip().splitlines()[-1][:160] if report.longreprtext else ""
    if report.when == "call":
        for name, text in report.user_properties:
            if name == "summary":
                entry["summary"] = text


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        entry = _ACCEPTANCE[number]
        status = "PASS" if entry["passed"] and entry["ran"] else ("FAIL" if entry["ran"] else "NOT RUN")
        line = f"criterion {number:2d} {status}: {entry['title']}"
        if entry.get("summary"):
            line += f" | {entry['summary']}"
        if entry["detail"]:
            line += f" | {entry['detail']}"
        terminalreporter.write_line(line)
