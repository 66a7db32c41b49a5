import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_NAMES = {}  # node id -> criterion name
_STATUS = {}  # criterion name -> PASS / FAIL / SKIP


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): a headline acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("acceptance")
        if m is not None:
            _NAMES[item.nodeid] = m.args[0]


def pytest_runtest_logreport(report):
    name = _NAMES.get(report.nodeid)
    if name is None:
        return
    if report.failed:
        _STATUS[name] = "FAIL"
    elif report.when == "call" and _STATUS.get(name) != "FAIL":
        _STATUS[name] = "PASS"
    elif report.skipped and name not in _STATUS:
        _STATUS[name] = "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _STATUS:
        return
    terminalreporter.section("acceptance criteria")
    for name in dict.fromkeys(_NAMES.values()):
        if name in _STATUS:
            terminalreporter.write_line(f"{_STATUS[name]:<4}  {name}")
