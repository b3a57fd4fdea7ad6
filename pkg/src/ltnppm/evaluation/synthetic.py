"""Synthetic hospital-style event logs with planted outcome rules.

Each planted rule has an antecedent that the generator switches on with a
given probability per case.  The label is positive iff some positive-effect
rule fires (and no negative-effect rule does), then flipped with probability
``noise``.  Rules come back as DSL text so experiments can inject the true
rules, or label-inverted adversarial copies of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np

from ..eventlog import Event, Trace

ACTIVITIES = ("Reg", "Rev", "Exam", "Lab", "Surg", "ATB", "PostCU", "PAdm", "Disch")
WARDS = ("GEN", "CARD", "ORTH", "NEURO")


@dataclass(frozen=True)
class PlantedRule:
    """One antecedent kind with its firing probability and label effect.

    kinds: ``delay`` (wait_time(Surg, ATB) > 2), ``age`` (age > 60),
    ``oxygen`` (last oxygen_sat < 90), ``revisit`` (Rev at least twice),
    ``icu`` (case ward = ICU).
    """

    kind: str
    prob: float
    effect: str = "positive"

    def __post_init__(self):
        if self.kind not in RULE_CONDITIONS:
            raise ValueError(f"unknown planted rule kind {self.kind!r}")
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"firing probability {self.prob} outside [0, 1]")
        if self.effect not in ("positive", "negative"):
            raise ValueError("effect must be 'positive' or 'negative'")

    @property
    def condition(self) -> str:
        return RULE_CONDITIONS[self.kind]

    def dsl(self, rid: str, inverted: bool = False, scope: str = "all") -> str:
        positive = (self.effect == "positive") != inverted
        return f"{rid}: if {self.condition} on {scope} then {'P' if positive else 'not P'}"


RULE_CONDITIONS = {
    "delay": "wait_time(Surg, ATB) > 2",
    "age": "payload(age, case) > 60",
    "oxygen": "payload(oxygen_sat, last) < 90",
    "revisit": "occ_count(Rev) >= 2",
    "icu": "payload(ward, case) = ICU",
}

DEFAULT_RULES = (
    PlantedRule("delay", 0.25),
    PlantedRule("age", 0.2),
    PlantedRule("oxygen", 0.2),
    PlantedRule("revisit", 0.2),
)


@dataclass(frozen=True)
class SyntheticSpec:
    n_traces: int = 500
    rules: tuple[PlantedRule, ...] = DEFAULT_RULES
    noise: float = 0.0
    surgery_rate: float = 0.5  # surgery rate among cases where the delay rule does not fire
    start: datetime = datetime(2024, 1, 1, tzinfo=timezone.utc)
    span_days: float = 365.0

    def __post_init__(self):
        if self.n_traces < 1:
            raise ValueError("n_traces must be >= 1")
        for name in ("noise", "surgery_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        kinds = [r.kind for r in self.rules]
        if len(set(kinds)) != len(kinds):
            raise ValueError("each planted rule kind may appear once")


@dataclass
class SyntheticLog:
    traces: list[Trace]
    rules: tuple[PlantedRule, ...]
    fired: dict[str, dict[str, bool]] = field(default_factory=dict)  # case -> kind -> fired

    def rule_text(self, inverted: frozenset[str] | set[str] = frozenset(), kinds=None, scope: str = "all") -> str:
        """DSL lines for the planted rules; kinds in ``inverted`` get the opposite consequent."""
        lines = []
        for r in self.rules:
            if kinds is not None and r.kind not in kinds:
                continue
            tag = "adv" if r.kind in inverted else "true"
            lines.append(r.dsl(f"{tag}_{r.kind}", r.kind in inverted, scope))
        return "\n".join(lines) + "\n"


def _hours(rng, lo, hi) -> timedelta:
    return timedelta(hours=float(rng.uniform(lo, hi)))


def _make_trace(cid: str, rng: np.random.Generator, spec: SyntheticSpec, fires: dict[str, bool], t0: datetime):
    kinds = {r.kind for r in spec.rules}
    ev: list[tuple[str, dict]] = []
    revisits = int(rng.integers(2, 4)) if fires.get("revisit") else 1
    ev.append(("Reg", {}))
    for _ in range(revisits):
        ev.append(("Rev", {}))
    ev.append(("Exam", {}))
    if "oxygen" in kinds:
        ox = rng.uniform(82, 89.5) if fires["oxygen"] else rng.uniform(90.5, 99)
    else:
        ox = rng.uniform(90.5, 99)
    ev.append(("Lab", {"oxygen_sat": round(float(ox), 1)}))
    surgery = fires.get("delay", False) or rng.random() < spec.surgery_rate
    delay = None
    if surgery:
        ev.append(("Surg", {}))
        delay = rng.uniform(2.5, 6.0) if fires.get("delay") else rng.uniform(0.2, 1.8)
        ev.append(("ATB", {}))
        ev.append(("PostCU", {}))
    if rng.random() < 0.3:
        ev.append(("PAdm", {}))
    ev.append(("Disch", {}))

    events = []
    t = t0
    for i, (act, attrs) in enumerate(ev):
        if i:
            gap = timedelta(hours=float(delay)) if act == "ATB" else _hours(rng, 0.3, 3.0)
            t = t + gap
        events.append(Event(act, cid, t.replace(microsecond=(t.microsecond // 1000) * 1000), attrs))

    if "age" in kinds:
        age = rng.integers(61, 91) if fires["age"] else rng.integers(20, 60)
    else:
        age = rng.integers(20, 91)
    case = {"age": float(age)}
    if "icu" in kinds:
        case["ward"] = "ICU" if fires["icu"] else str(rng.choice(WARDS))
    return tuple(events), case


def generate_synthetic_log(spec: SyntheticSpec, seed: int = 0) -> SyntheticLog:
    """Generate ``spec.n_traces`` labeled traces with case start times spread over the span."""
    rng = np.random.default_rng(seed)
    starts = np.sort(rng.uniform(0, spec.span_days * 24, size=spec.n_traces))
    width = len(str(spec.n_traces))
    traces, fired = [], {}
    for i, h in enumerate(starts):
        cid = f"case{i:0{width}d}"
        fires = {r.kind: bool(rng.random() < r.prob) for r in spec.rules}
        events, case = _make_trace(cid, rng, spec, fires, spec.start + timedelta(hours=float(h)))
        pos = any(fires[r.kind] for r in spec.rules if r.effect == "positive")
        neg = any(fires[r.kind] for r in spec.rules if r.effect == "negative")
        label = int(pos and not neg)
        if rng.random() < spec.noise:
            label = 1 - label
        traces.append(Trace(cid, events, case, label))
        fired[cid] = fires
    return SyntheticLog(traces, tuple(spec.rules), fired)
