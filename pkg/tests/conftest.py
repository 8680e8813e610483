"""Prints a one-line verdict per acceptance criterion after the run.

Each ``test_criterion_*`` in test_acceptance.py carries the criterion
number in its name and a one-line docstring describing what it checks;
both end up in the summary block so a run's acceptance status is
readable without scrolling through the full pytest output.
"""

import re

_ACCEPTANCE_FILE = "test_acceptance.py"
_results = {}


def pytest_collection_modifyitems(items):
    for item in items:
        match = re.match(r"test_criterion_(\d+)", item.name)
        if _ACCEPTANCE_FILE in str(item.fspath) and match:
            doc = (item.function.__doc__ or "").strip().splitlines()
            _results[int(match.group(1))] = {
                "description": doc[0] if doc else item.name,
                "outcome": "NOT RUN",
            }


def pytest_runtest_logreport(report):
    match = re.match(r"test_criterion_(\d+)", report.location[2].split(".")[-1])
    if _ACCEPTANCE_FILE not in report.location[0] or not match:
        return
    number = int(match.group(1))
    if number not in _results:
        return
    if report.when == "call":
        _results[number]["outcome"] = "PASS" if report.passed else "FAIL"
    elif report.when == "setup" and (report.failed or report.skipped):
        _results[number]["outcome"] = "FAIL" if report.failed else "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        entry = _results[number]
        terminalreporter.write_line(
            f"criterion {number:2d}: {entry['outcome']:<7s} {entry['description']}"
        )
