"""Event logs: CSV ingestion, trace labeling, prefix generation and splits."""

from __future__ import annotations

import csv
import json
import logging
import math
import operator
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Iterable, Mapping, Sequence, Union

import numpy as np

if TYPE_CHECKING:
    from .rules import KnowledgeBase

log = logging.getLogger(__name__)

AttrValue = Union[float, str]

POSITIVE = 1
NEGATIVE = 0


class LogError(ValueError):
    """Malformed or unusable event log input."""


@dataclass(frozen=True)
class Event:
    activity: str
    case_id: str
    timestamp: datetime
    attributes: Mapping[str, AttrValue] = field(default_factory=dict)

    def __post_init__(self):
        if not self.activity:
            raise LogError("event activity must be nonempty")
        if not self.case_id:
            raise LogError("event case_id must be nonempty")


@dataclass(frozen=True)
class Trace:
    case_id: str
    events: tuple[Event, ...]
    case_attributes: Mapping[str, AttrValue] = field(default_factory=dict)
    label: int | None = None

    def __post_init__(self):
        for e in self.events:
            if e.case_id != self.case_id:
                raise LogError(f"event of case {e.case_id!r} inside trace {self.case_id!r}")
        for a, b in zip(self.events, self.events[1:]):
            if b.timestamp < a.timestamp:
                raise LogError(f"trace {self.case_id!r}: timestamps decrease")

    def __len__(self) -> int:
        return len(self.events)

    @property
    def activities(self) -> tuple[str, ...]:
        return tuple(e.activity for e in self.events)

    @property
    def end_time(self) -> datetime:
        return self.events[-1].timestamp

    def prefix(self, k: int) -> "Prefix":
        return Prefix(self.case_id, self.events[:k], k, self.label, self.case_attributes)


@dataclass(frozen=True)
class Prefix:
    case_id: str
    events: tuple[Event, ...]
    k: int
    label: int | None
    case_attributes: Mapping[str, AttrValue] = field(default_factory=dict)

    def __post_init__(self):
        if self.k != len(self.events) or self.k < 1:
            raise LogError(f"prefix length {self.k} does not match {len(self.events)} events")

    def __len__(self) -> int:
        return self.k

    @property
    def activities(self) -> tuple[str, ...]:
        return tuple(e.activity for e in self.events)


@dataclass(frozen=True)
class LogSchema:
    case: str = "case_id"
    activity: str = "activity"
    timestamp: str = "timestamp"
    label: str | None = None
    case_columns: tuple[str, ...] = ()

    def is_case_column(self, name: str) -> bool:
        return name in self.case_columns or name.startswith("case:")


# --- loading ------------------------------------------------------------


def parse_timestamp(text: str) -> datetime:
    """ISO-8601 to an aware UTC datetime truncated to milliseconds."""
    s = text.strip()
    if s.endswith("Z"):
        s = s[:-1] + "+00:00"
    ts = datetime.fromisoformat(s)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    ts = ts.astimezone(timezone.utc)
    return ts.replace(microsecond=(ts.microsecond // 1000) * 1000)


def _as_number(text: str) -> float | None:
    try:
        v = float(text)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def _parse_label(text: str) -> int:
    t = text.strip().lower()
    if t in {"1", "true", "positive", "pos", "+", "yes"}:
        return POSITIVE
    if t in {"0", "false", "negative", "neg", "-", "no"}:
        return NEGATIVE
    raise LogError(f"unrecognised label value {text!r}")


def load_log(path: str | Path, schema: LogSchema | None = None) -> list[Trace]:
    """Read a CSV event log into traces grouped by case, sorted by timestamp.

    Columns other than case/activity/timestamp/label become attributes.
    Case columns (listed in the schema or prefixed ``case:``) are read from the
    first row of each case.  A column is numeric when every nonempty value
    parses as a number; empty cells mean the attribute is absent.
    """
    schema = schema or LogSchema()
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (schema.case, schema.activity, schema.timestamp):
            if col not in header:
                raise LogError(f"{path}: missing required column {col!r}")
        rows = list(reader)
    if not rows:
        raise LogError(f"{path}: empty log")

    reserved = {schema.case, schema.activity, schema.timestamp, schema.label}
    extra = [c for c in header if c not in reserved]
    numeric = {
        c: all(_as_number(r[c]) is not None for r in rows if r.get(c, "") not in ("", None))
        for c in extra
    }

    def value(col: str, raw: str) -> AttrValue:
        return float(raw) if numeric[col] else raw

    grouped: dict[str, list[tuple[datetime, int, Event]]] = defaultdict(list)
    case_attrs: dict[str, dict[str, AttrValue]] = {}
    labels: dict[str, int] = {}
    for rownum, row in enumerate(rows, start=2):  # header is line 1
        cid = (row[schema.case] or "").strip()
        act = (row[schema.activity] or "").strip()
        if not cid or not act:
            raise LogError(f"{path}:{rownum}: empty case id or activity")
        try:
            ts = parse_timestamp(row[schema.timestamp] or "")
        except ValueError:
            raise LogError(
                f"{path}:{rownum}: unparseable timestamp {row[schema.timestamp]!r}"
            ) from None
        attrs: dict[str, AttrValue] = {}
        cattrs = case_attrs.setdefault(cid, {})
        for col in extra:
            raw = row.get(col)
            if raw in ("", None):
                continue
            if schema.is_case_column(col):
                name = col[5:] if col.startswith("case:") else col
                cattrs.setdefault(name, value(col, raw))
            else:
                attrs[col] = value(col, raw)
        if schema.label and row.get(schema.label) not in ("", None):
            labels.setdefault(cid, _parse_label(row[schema.label]))
        grouped[cid].append((ts, rownum, Event(act, cid, ts, attrs)))

    traces = []
    for cid, items in grouped.items():
        items.sort(key=lambda t: (t[0], t[1]))  # stable on file order
        traces.append(
            Trace(cid, tuple(e for _, _, e in items), case_attrs.get(cid, {}), labels.get(cid))
        )
    log.info("loaded %d events in %d traces from %s", len(rows), len(traces), path)
    return traces


def write_log(traces: Iterable[Trace], path: str | Path, label_column: str | None = "label") -> None:
    """Write traces back to CSV; case attributes get a ``case:`` prefix."""
    traces = list(traces)
    ev_cols: list[str] = []
    case_cols: list[str] = []
    for t in traces:
        for k in t.case_attributes:
            if k not in case_cols:
                case_cols.append(k)
        for e in t.events:
            for k in e.attributes:
                if k not in ev_cols:
                    ev_cols.append(k)
    header = ["case_id", "activity", "timestamp", *ev_cols, *(f"case:{c}" for c in case_cols)]
    if label_column:
        header.append(label_column)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t in traces:
            for e in t.events:
                row = [t.case_id, e.activity, format_timestamp(e.timestamp)]
                row += [_fmt(e.attributes.get(c)) for c in ev_cols]
                row += [_fmt(t.case_attributes.get(c)) for c in case_cols]
                if label_column:
                    row.append("" if t.label is None else str(t.label))
                w.writerow(row)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).isoformat(timespec="milliseconds").replace("+00:00", "Z")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


# --- labeling -----------------------------------------------------------

_OPS: dict[str, Callable] = {
    ">": operator.gt,
    ">=": operator.ge,
    "<": operator.lt,
    "<=": operator.le,
    "=": operator.eq,
    "==": operator.eq,
    "!=": operator.ne,
}

_LABELER_RE = re.compile(
    r"^\s*(?P<neg>not\s+)?(?:"
    r"contains\s+(?P<act>\S+)"
    r"|attribute\s+(?P<attr>[\w:.\-]+)\s*(?P<op>>=|<=|==|!=|=|>|<)\s*(?P<val>\S+)"
    r")\s*$"
)


def _known_attributes(traces: Sequence[Trace]) -> set[str]:
    names: set[str] = set()
    for t in traces:
        names.update(t.case_attributes)
        for e in t.events:
            names.update(e.attributes)
    return names


def compile_labeler(text: str, traces: Sequence[Trace] = ()) -> Callable[[Trace], bool]:
    """Build a trace predicate from ``contains <act>`` or ``attribute <name> <op> <value>``.

    Attribute conditions read the case attribute when present, otherwise the
    last event value of that attribute.  ``not`` negates either form.
    """
    m = _LABELER_RE.match(text)
    if not m:
        raise LogError(f"cannot parse labeler {text!r}")
    negate = bool(m["neg"])
    if m["act"]:
        act = m["act"]

        def cond(t: Trace) -> bool:
            return any(e.activity == act for e in t.events)

    else:
        attr, op = m["attr"], _OPS[m["op"]]
        num = _as_number(m["val"])
        target: AttrValue = num if num is not None else m["val"]
        if traces and attr not in _known_attributes(traces):
            raise LogError(f"labeler references unknown attribute {attr!r}")

        def cond(t: Trace) -> bool:
            v = t.case_attributes.get(attr)
            if v is None:
                for e in reversed(t.events):
                    if attr in e.attributes:
                        v = e.attributes[attr]
                        break
            if v is None:
                return False
            if isinstance(target, float) != isinstance(v, float):
                return op(str(v), str(target)) if op in (operator.eq, operator.ne) else False
            return bool(op(v, target))

    return (lambda t: not cond(t)) if negate else cond


def label_traces(traces: Sequence[Trace], labeler: str) -> tuple[list[Trace], dict[str, int]]:
    """Label every trace positive/negative; returns the traces and class counts."""
    cond = compile_labeler(labeler, traces)
    out = [replace(t, label=POSITIVE if cond(t) else NEGATIVE) for t in traces]
    counts = class_counts(out)
    log.info("labeled %d traces: %s", len(out), counts)
    return out, counts


def class_counts(traces: Iterable[Trace | Prefix]) -> dict[str, int]:
    c = Counter(t.label for t in traces)
    return {"positive": c.get(POSITIVE, 0), "negative": c.get(NEGATIVE, 0)}


# --- prefixes -----------------------------------------------------------


def generate_prefixes(traces: Iterable[Trace], min_len: int = 2, max_len: int | None = None) -> list[Prefix]:
    if min_len < 1:
        raise ValueError("min_len must be >= 1")
    out = []
    for t in traces:
        hi = len(t) if max_len is None else min(max_len, len(t))
        out.extend(t.prefix(k) for k in range(min_len, hi + 1))
    return out


# --- splits -------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "temporal"
    train_fraction: float = 0.64
    validation_fraction: float = 0.16
    compliant_enrichment_ratio: float = 0.0
    min_prefix_len: int = 2
    max_prefix_len: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("temporal", "compliance_aware"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must be in (0, 1)")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in [0, 1)")
        if self.train_fraction + self.validation_fraction >= 1:
            raise ValueError("train_fraction + validation_fraction must be < 1")
        if not 0 <= self.compliant_enrichment_ratio <= 1:
            raise ValueError("compliant_enrichment_ratio must be in [0, 1]")
        if self.min_prefix_len < 1:
            raise ValueError("min_prefix_len must be >= 1")


@dataclass
class Split:
    train: list[Trace]
    validation: list[Trace]
    test: list[Trace]
    mode: str = "temporal"
    compliant_fraction: dict[str, float] = field(default_factory=dict)
    moved_to_test: list[str] = field(default_factory=list)
    moved_to_train: list[str] = field(default_factory=list)

    def case_ids(self) -> dict[str, list[str]]:
        return {
            "train": [t.case_id for t in self.train],
            "validation": [t.case_id for t in self.validation],
            "test": [t.case_id for t in self.test],
        }

    def manifest(self) -> dict:
        return {
            "mode": self.mode,
            "sizes": {k: len(v) for k, v in self.case_ids().items()},
            "case_ids": self.case_ids(),
            "compliant_fraction": self.compliant_fraction,
            "moved_to_test": self.moved_to_test,
            "moved_to_train": self.moved_to_train,
        }

    def write_manifest(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))


def temporal_split(traces: Sequence[Trace], spec: SplitSpec) -> Split:
    """Order by completion time (ties by case id) and cut train/validation/test."""
    if len(traces) < 3:
        raise LogError("temporal split needs at least 3 traces")
    ordered = sorted(traces, key=lambda t: (t.end_time, t.case_id))
    n = len(ordered)
    n_train = int(round(n * spec.train_fraction))
    n_val = int(round(n * spec.validation_fraction))
    n_train = max(1, min(n_train, n - 1))
    n_val = max(0, min(n_val, n - n_train - 1))
    return Split(
        train=ordered[:n_train],
        validation=ordered[n_train : n_train + n_val],
        test=ordered[n_train + n_val :],
        mode="temporal",
    )


def _fraction(traces: Sequence[Trace], flags: Mapping[str, bool]) -> float:
    return sum(flags[t.case_id] for t in traces) / len(traces) if traces else 0.0


def compliance_aware_split(traces: Sequence[Trace], kb: "KnowledgeBase", spec: SplitSpec) -> Split:
    """Temporal split whose test set is enriched with rule-compliant traces.

    Compliant traces are donated from the training period (train, then
    validation) until the test compliant fraction reaches the target; the
    test set keeps its size, so the remainder is a seeded random sample of the
    original non-compliant test traces and the displaced ones go to train.
    """
    from .rules import is_compliant

    base = temporal_split(traces, spec)
    flags = {t.case_id: is_compliant(t, kb) for t in traces}
    if not any(flags.values()):
        raise LogError("no rule-compliant traces in the log; review the rule set")
    ratio = spec.compliant_enrichment_ratio
    if ratio <= 0:
        base.mode = "compliance_aware"
        base.compliant_fraction = {
            name: _fraction(part, flags)
            for name, part in (("train", base.train), ("validation", base.validation), ("test", base.test))
        }
        return base

    rng = np.random.default_rng(spec.seed)
    n_test = len(base.test)
    target = int(math.ceil(ratio * n_test - 1e-9))
    test_comp = [t for t in base.test if flags[t.case_id]]
    test_other = [t for t in base.test if not flags[t.case_id]]
    need = max(0, target - len(test_comp))
    pool = [t for t in base.train if flags[t.case_id]] + [t for t in base.validation if flags[t.case_id]]
    donated: list[Trace] = []
    if need and pool:
        pick = sorted(rng.choice(len(pool), size=min(need, len(pool)), replace=False))
        donated = [pool[i] for i in pick]
    donated_ids = {t.case_id for t in donated}
    n_fill = max(0, n_test - len(test_comp) - len(donated))
    keep_idx = sorted(rng.choice(len(test_other), size=min(n_fill, len(test_other)), replace=False))
    kept_other = [test_other[i] for i in keep_idx]
    kept_ids = {t.case_id for t in kept_other}
    displaced = [t for t in test_other if t.case_id not in kept_ids]

    train = [t for t in base.train if t.case_id not in donated_ids] + displaced
    validation = [t for t in base.validation if t.case_id not in donated_ids]
    test = sorted(test_comp + donated + kept_other, key=lambda t: (t.end_time, t.case_id))
    split = Split(train, validation, test, mode="compliance_aware")
    split.moved_to_test = [t.case_id for t in donated]
    split.moved_to_train = [t.case_id for t in displaced]
    split.compliant_fraction = {
        "train": _fraction(train, flags),
        "validation": _fraction(validation, flags),
        "test": _fraction(test, flags),
    }
    if len(test_comp) + len(donated) < target:
        log.warning("compliant pool exhausted: test compliant fraction %.3f < %.3f",
                    split.compliant_fraction["test"], ratio)
    log.info("compliance-aware split: moved %d compliant traces to test, %d displaced to train",
             len(donated), len(displaced))
    return split


def make_split(traces: Sequence[Trace], spec: SplitSpec, kb: "KnowledgeBase | None" = None) -> Split:
    if spec.mode == "temporal":
        return temporal_split(traces, spec)
    if kb is None:
        raise LogError("compliance-aware split needs a rule set")
    return compliance_aware_split(traces, kb, spec)
