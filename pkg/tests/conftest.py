"""Collects acceptance-criterion outcomes and prints one line per criterion.

Values a test records with ``record_property("measured", ...)`` are listed
under its criterion.
"""

import pytest

_outcomes = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _outcomes.setdefault(n, {"title": title, "passed": True, "ran": False, "measured": []})
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        entry["ran"] = True
        entry["measured"] += [v for k, v in item.user_properties if k == "measured"]
        if call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception):
            entry["passed"] = False


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        e = _outcomes[n]
        status = "PASS" if e["ran"] and e["passed"] else ("FAIL" if e["ran"] else "NOT RUN")
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {e['title']}")
        for line in e["measured"]:
            terminalreporter.write_line(f"    {line}")
