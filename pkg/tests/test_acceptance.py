"""End-to-end acceptance checks; each prints one PASS/FAIL line."""

import pytest

from vibroplate import acceptance as acc

CTX = acc.AcceptanceContext()


@pytest.mark.parametrize("criterion", acc.CRITERIA, ids=lambda c: f"{c.number:02d}-{c.criterion_name}")
def test_criterion(criterion, capsys):
    result = criterion(CTX)
    with capsys.disabled():
        print("\n" + result.line())
    assert result.passed, result.summary
    assert result.elapsed_s <= result.budget_s
