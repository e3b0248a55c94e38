"""Prints one PASS/FAIL summary line per acceptance criterion."""

import re

import pytest

_PATTERN = re.compile(r"test_criterion_(\d+)_(\w+)")
_RESULTS: dict[int, tuple[str, str]] = {}
_DETAILS: dict[int, str] = {}


@pytest.fixture
def acceptance_log():
    """Attach a short detail string to the criterion's summary line."""

    def log(number: int, detail: str) -> None:
        _DETAILS[int(number)] = str(detail)

    return log


def pytest_runtest_logreport(report):
    match = _PATTERN.search(report.nodeid)
    if match is None:
        return
    num = int(match.group(1))
    label = match.group(2).replace("_", " ")
    # record call outcomes, plus setup/teardown failures (fixture errors)
    if report.when == "call" or report.outcome == "failed":
        _RESULTS[num] = (label, report.outcome)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_RESULTS):
        label, outcome = _RESULTS[num]
        status = "PASS" if outcome == "passed" else "FAIL"
        if outcome == "skipped":
            status = "SKIP"
        detail = _DETAILS.get(num, "")
        suffix = f"  [{detail}]" if detail else ""
        terminalreporter.write_line(f"{status} criterion {num:2d}: {label}{suffix}")
