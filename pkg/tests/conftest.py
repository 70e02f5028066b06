import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")
_results: dict = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2).replace("_", " "))
    if report.when == "call" or report.outcome != "passed":
        ok = report.passed and not hasattr(report, "wasxfail")
        _results[key] = "PASS" if ok and _results.get(key, "PASS") == "PASS" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for (num, name), status in sorted(_results.items()):
        terminalreporter.write_line(f"{status} criterion {num:2d}: {name}")
