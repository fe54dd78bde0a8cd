"""Prints the acceptance summary lines collected by tests/test_acceptance.py."""

_LINES = []


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    for key, value in report.user_properties:
        if key == "criterion":
            _LINES.append(("PASS" if report.passed else "FAIL", value))


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for status, line in _LINES:
        terminalreporter.write_line(f"{status}  {line}")
