"""Prints one PASS/FAIL line per acceptance criterion after the run."""

import re

import pytest

_CRITERION = re.compile(r"test_criterion_(\d+)_")
_titles = {}
_outcomes = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = _CRITERION.match(item.name)
        if m:
            doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
            _titles[int(m.group(1))] = doc


@pytest.hookimpl(trylast=True)
def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid.rsplit("::", 1)[-1])
    if not m:
        return
    n = int(m.group(1))
    if report.failed:
        _outcomes[n] = "FAIL"
    elif report.when == "call" and report.passed:
        _outcomes.setdefault(n, "PASS")
    elif report.skipped:
        _outcomes.setdefault(n, "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        terminalreporter.write_line(f"criterion {n:>2}: {_outcomes[n]:<4} {_titles.get(n, '')}")
