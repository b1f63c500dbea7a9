"""Shared pytest wiring: a per-criterion summary for the acceptance suite."""

_acceptance_reports = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.skipped):
        _acceptance_reports[report.nodeid] = report


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_reports:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_acceptance_reports):
        report = _acceptance_reports[nodeid]
        name = nodeid.split("::")[-1]
        if report.passed:
            status, note = "PASS", ""
        elif report.skipped:
            status, note = "SKIP", ""
            if isinstance(report.longrepr, tuple):
                note = "  -- " + report.longrepr[2].removeprefix("Skipped: ")
        else:
            status, note = "FAIL", ""
        terminalreporter.write_line(f"{status:<5} {name}{note}")
