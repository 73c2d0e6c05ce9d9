import re
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_outcomes: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m or "test_acceptance.py" not in report.nodeid:
        return
    num, name = int(m.group(1)), m.group(2)
    if report.when == "call" or report.outcome != "passed":
        if report.passed:
            status = "PASS"
        elif hasattr(report, "wasxfail"):
            status = "FAIL (expected, see notes)"
        elif report.skipped:
            status = "SKIP"
        else:
            status = "FAIL"
        if num not in _outcomes or _outcomes[num][0] == "PASS":
            _outcomes[num] = (status, name.replace("_", " "))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_outcomes):
        status, name = _outcomes[num]
        terminalreporter.write_line(f"criterion {num}: {status:5s}  {name}")


@pytest.fixture
def rng():
    from metaci.mathcore import RngStream

    return RngStream(20240607)
