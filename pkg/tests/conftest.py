"""Shared fixtures, markers and the acceptance summary."""
from __future__ import annotations

import json
from pathlib import Path

import pytest

GOLDEN = json.loads((Path(__file__).parent / "golden" / "values.json").read_text())

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
VERDICTS: dict[int, tuple[bool, str]] = {}
# outcomes of tests marked `property` in this session
PROPERTY_OUTCOMES: dict[str, bool] = {}


def pytest_collection_modifyitems(config, items):
    # criterion 11 summarizes the property tests, so it has to run last
    last = [it for it in items if it.name == "test_criterion_11_property_suites"]
    items[:] = [it for it in items if it not in last] + last


def pytest_runtest_logreport(report):
    if "property" not in report.keywords:
        return
    ok = report.passed or report.skipped
    if report.when == "call" or not ok:
        PROPERTY_OUTCOMES[report.nodeid] = PROPERTY_OUTCOMES.get(report.nodeid, True) and ok


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}")


@pytest.fixture
def golden():
    return GOLDEN
