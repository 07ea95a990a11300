import os
import re
import sys

sys.path.insert(0, os.path.dirname(__file__))

from acceptance_log import NOTES  # noqa: E402

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_results: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n, name = int(m.group(1)), m.group(2).replace("_", " ")
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _results[n] = ("PASS" if report.outcome == "passed" else "FAIL", name)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        status, name = _results[n]
        extra = f"  ({NOTES[n]})" if n in NOTES else ""
        terminalreporter.write_line(f"criterion {n:2d} {status}  {name}{extra}")
