import re

import report as acceptance

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if m and report.failed:
        n = int(m.group(1))
        detail = acceptance.LINES.get(n, ("", "raised before reporting"))[1]
        acceptance.LINES[n] = ("FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not acceptance.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.LINES):
        status, detail = acceptance.LINES[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
