"""One line per acceptance criterion, at full trial counts.

Set ``DEREVM_QUICK=1`` for reduced Monte Carlo counts (same thresholds).
"""
import os

import pytest

from derevm.checks import CHECKS

QUICK = os.environ.get("DEREVM_QUICK", "") not in ("", "0")


@pytest.mark.parametrize("name", list(CHECKS))
def test_criterion(name, capsys):
    result = CHECKS[name](QUICK)
    with capsys.disabled():
        print("\n" + result.line())
    assert result.passed, result.line()
