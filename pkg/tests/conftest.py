"""Collects the per-criterion verdicts of test_acceptance.py and prints them at the end."""

_VERDICTS = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        detail = dict(report.user_properties).get("detail", "")
        label = report.nodeid.split("::")[-1]
        _VERDICTS.append(f"{'PASS' if report.passed else 'FAIL'}  {label}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
