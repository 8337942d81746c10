import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    number, text = mark.args
    entry = _CRITERIA.setdefault(number, [text, "PASS", ""])
    if rep.failed:
        entry[1] = "FAIL"
        entry[2] = str(rep.longrepr.reprcrash.message if hasattr(rep.longrepr, "reprcrash") else rep.longrepr)
        entry[2] = entry[2].splitlines()[0][:160]
    elif rep.skipped and entry[1] == "PASS":
        entry[1] = "SKIP"
    detail = getattr(item, "criterion_detail", "")
    if detail and rep.when == "call" and not entry[2]:
        entry[2] = detail


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        text, status, detail = _CRITERIA[number]
        line = f"criterion {number:2d} {status}: {text}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
