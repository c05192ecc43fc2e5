"""Collects acceptance outcomes and prints one line per criterion."""

import pytest

_CRITERIA: dict[int, str] = {}
_NODE: dict[str, int] = {}
_OUTCOME: dict[int, list[bool]] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            n, label = m.args
            _CRITERIA[n] = label
            _NODE[item.nodeid] = n


def pytest_runtest_logreport(report):
    n = _NODE.get(report.nodeid)
    if n is None:
        return
    if report.when == "call" or report.failed:
        _OUTCOME.setdefault(n, []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOME:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        res = _OUTCOME.get(n)
        status = "NOT RUN" if res is None else ("PASS" if all(res) else "FAIL")
        terminalreporter.write_line(f"criterion {n:2d} {status:7s} {_CRITERIA[n]}")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, label): acceptance criterion number and label")
