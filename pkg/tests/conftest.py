import os

import pytest

ACCEPTANCE_LINES: list[str] = []


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="also run multi-hour training checks (or set CURIONAV_SLOW=1)")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-hour training checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow") or os.environ.get("CURIONAV_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow: pass --runslow or set CURIONAV_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for a criterion, then assert it."""
    def report(number: int, title: str, ok: bool, detail: str = ""):
        line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
