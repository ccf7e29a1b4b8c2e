import re

import pytest

_CRITERIA: list[tuple[int, bool, str]] = []
_COLLECTED: set[int] = set()


def pytest_runtest_setup(item):
    m = re.match(r"test_criterion_(\d+)_", item.name)
    if m:
        _COLLECTED.add(int(m.group(1)))


@pytest.fixture(scope="session")
def criterion_report():
    """Collects one (number, passed, detail) entry per acceptance criterion;
    the terminal summary prints them as PASS/FAIL lines."""

    def record(number: int, passed: bool, detail: str) -> bool:
        _CRITERIA.append((number, passed, detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    recorded = {number for number, _, _ in _CRITERIA}
    rows = sorted(_CRITERIA) + [
        (number, False, "test errored before recording a result")
        for number in sorted(_COLLECTED - recorded)
    ]
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(rows):
        word = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{word} criterion-{number}: {detail}")
