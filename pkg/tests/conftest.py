"""Per-criterion pass/fail lines for the acceptance suite."""

import pytest

_results: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not report.failed:
        return
    n = marker.args[0]
    entry = _results.setdefault(n, {"passed": True, "details": [], "title": marker.kwargs.get("title", "")})
    if report.failed:
        entry["passed"] = False
        message = report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash") else str(report.longrepr)
        entry["details"].append(f"{item.name}: {message.splitlines()[0] if message else 'failed'}")
    for key, value in report.user_properties:
        if key == "detail":
            entry["details"].append(str(value))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_results):
        entry = _results[n]
        tr.write_line(f"criterion {n:>2}: {'PASS' if entry['passed'] else 'FAIL'}  {entry['title']}")
        for d in entry["details"]:
            tr.write_line(f"               {d}")
