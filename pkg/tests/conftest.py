"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line each."""

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(k): acceptance criterion number")


def pytest_itemcollected(item):
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        item.user_properties.append(("criterion", mark.args[0]))


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    detail = dict(report.user_properties).get("detail", "")
    ok = report.passed if report.when == "call" else not report.failed
    prev = _CRITERIA.get(crit, (True, ""))
    _CRITERIA[crit] = (prev[0] and ok, detail or prev[1])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_CRITERIA):
        ok, detail = _CRITERIA[crit]
        line = f"{'PASS' if ok else 'FAIL'} criterion {crit}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
