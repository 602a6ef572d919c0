"""Collects one PASS/FAIL line per acceptance criterion and prints them at the end of the run."""

import pytest

_LINES = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    n = marker.args[0]
    detail = dict(item.user_properties).get("detail", "")
    if report.when == "setup" and report.passed:
        return
    ok = report.passed and not hasattr(report, "wasxfail")
    status = "PASS" if ok else "FAIL"
    if hasattr(report, "wasxfail"):
        detail = f"{detail} (expected failure: {report.wasxfail})".strip()
    _LINES[n] = f"Criterion {n}: {status}  {detail}".rstrip()


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LINES):
        terminalreporter.write_line(_LINES[n])
