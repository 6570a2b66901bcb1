from collections import OrderedDict

import pytest

_criteria: "OrderedDict[int, dict]" = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by a test")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            n, title = m.args
            _criteria.setdefault(n, {"title": title, "failed": [], "ran": 0})


def pytest_runtest_makereport(item, call):
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    entry = _criteria[m.args[0]]
    if call.when == "call":
        entry["ran"] += 1
    if call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception):
        entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        if e["ran"] == 0 and not e["failed"]:
            status = "NOT RUN"
        else:
            status = "FAIL" if e["failed"] else "PASS"
        line = f"criterion {n:2d} {status:7s} {e['title']}"
        if e["failed"]:
            line += f"  (failed: {', '.join(sorted(set(e['failed'])))})"
        terminalreporter.write_line(line)
