import re

import pytest

# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE: dict = {}


def record(criterion: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} ({detail})")
    return bool(passed)


@pytest.fixture
def accept():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    # "6a", "6 (setup)" and "10" sort numerically, then by suffix
    key = lambda c: (int(re.match(r"\d+", c).group()), c)
    for crit in sorted(ACCEPTANCE, key=key):
        ok, detail = ACCEPTANCE[crit]
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'}  {detail}")
