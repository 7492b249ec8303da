"""Acceptance suite: one check per criterion, each reporting a PASS/FAIL line.

The lines are collected and printed in the terminal summary of every pytest
run (see ``conftest.py``); ``cqdet verify`` prints the same lines.
"""

import pytest

from cqdet.verify import CHECKS

RESULT_LINES: list[str] = []


@pytest.mark.parametrize("check", CHECKS, ids=[fn.__name__ for fn in CHECKS])
def test_criterion(check):
    result = check(seed=0)
    RESULT_LINES.append(result.line())
    print(result.line())
    assert result.passed, result.line()
