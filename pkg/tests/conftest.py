"""Shared test plumbing: suite timing and acceptance result reporting."""

import time

SUITE_STARTED = time.perf_counter()
CRITERION_LINES = []


def suite_elapsed() -> float:
    return time.perf_counter() - SUITE_STARTED


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Print and remember one acceptance pass/fail line."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} [{detail}]"
    CRITERION_LINES.append(line)
    print(line, flush=True)


def pytest_collection_modifyitems(items):
    # unit suites first; the acceptance file both depends on them and
    # closes with a whole-suite runtime check
    items.sort(key=lambda item: item.nodeid.split("::")[0].endswith("test_acceptance.py"))


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)
