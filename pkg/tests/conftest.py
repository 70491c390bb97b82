"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

import re

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_outcomes: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if m is None:
        return
    n, name = int(m.group(1)), m.group(2).replace("_", " ")
    failed = report.failed or (report.when == "call" and report.outcome != "passed")
    if report.when == "call" or failed:
        status = "FAIL" if failed else ("PASS" if report.passed else report.outcome.upper())
        if _outcomes.get(n, ("", ""))[0] != "FAIL":
            _outcomes[n] = (status, name)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    from acceptance_log import DETAILS

    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        status, name = _outcomes[n]
        detail = DETAILS.get(n, "")
        terminalreporter.write_line(f"criterion {n} ({name}): {status}" + (f"  [{detail}]" if detail else ""))
