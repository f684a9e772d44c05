import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_criteria = []


@pytest.fixture
def criterion():
    """Record one acceptance verdict; the lines are printed in the terminal summary."""
    def record(name, passed, detail=""):
        _criteria.append((name, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _criteria:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
