from __future__ import annotations

import sys
from datetime import datetime, timedelta, timezone
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ltnppm.eventlog import Event, Trace  # noqa: E402

T0 = datetime(2024, 3, 1, 9, 0, tzinfo=timezone.utc)


def make_trace(case_id, steps, label=None, case=None, start=T0):
    """``steps`` is a list of (activity, hours_from_start[, attrs])."""
    events = []
    for step in steps:
        act, h = step[0], step[1]
        attrs = step[2] if len(step) > 2 else {}
        events.append(Event(act, case_id, start + timedelta(hours=h), attrs))
    return Trace(case_id, tuple(events), case or {}, label)


@pytest.fixture
def hospital_traces():
    return [
        make_trace("c1", [("Reg", 0), ("Rev", 1), ("Exam", 2), ("Surg", 3), ("ATB", 6)], 1, {"age": 70.0}),
        make_trace("c2", [("Reg", 0), ("Rev", 1), ("Exam", 1.5), ("Surg", 2), ("ATB", 2.5)], 0, {"age": 40.0}),
        make_trace("c3", [("Reg", 0), ("Lab", 1, {"oxygen_sat": 85.0}), ("Disch", 4)], 1, {"age": 55.0}),
        make_trace("c4", [("Reg", 0), ("Rev", 2), ("Disch", 3)], 0, {"age": 30.0}),
    ]


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the recorded detail."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or rep.when not in ("call", "setup"):
                continue
            if outcome == "passed" and rep.when != "call":
                continue
            name = nodeid.split("::")[-1][len("test_criterion_"):]
            detail = dict(rep.user_properties).get("detail", "")
            lines.append((name, "PASS" if outcome == "passed" else "FAIL", detail))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, status, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {name}: {status}" + (f"  ({detail})" if detail else ""))
