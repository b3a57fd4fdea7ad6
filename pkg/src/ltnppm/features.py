"""Control-flow, temporal and payload features over prefixes.

Every feature is a pure function of a prefix (anything with ``events`` and
``case_attributes``, so full traces work too) plus constant arguments.
Durations are in hours.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Protocol, Sequence

from .eventlog import AttrValue, Event


class FeatureError(ValueError):
    pass


class HasEvents(Protocol):
    events: Sequence[Event]
    case_attributes: Any


@dataclass(frozen=True)
class FeatureValue:
    kind: str  # boolean | numeric | categorical
    value: float | str | None
    defined: bool = True

    def __post_init__(self):
        if self.kind == "boolean" and self.defined and self.value not in (0, 1):
            raise FeatureError(f"boolean feature with value {self.value!r}")


UNDEFINED = FeatureValue("numeric", None, defined=False)


def _bool(flag: bool) -> FeatureValue:
    return FeatureValue("boolean", 1 if flag else 0)


def _hours(a: Event, b: Event) -> float:
    return (b.timestamp - a.timestamp).total_seconds() / 3600.0


# --- control flow -------------------------------------------------------


def has_act(l: HasEvents, a: str) -> FeatureValue:
    return _bool(any(e.activity == a for e in l.events))


def occ_count(l: HasEvents, a: str) -> FeatureValue:
    return FeatureValue("numeric", float(sum(e.activity == a for e in l.events)))


def is_next(l: HasEvents, a: str, b: str, strict: bool = False) -> FeatureValue:
    """Every ``a`` is immediately followed by ``b`` (chain response).

    Vacuously true when ``a`` is absent unless ``strict``.  An ``a`` at the
    end of the prefix has no successor and falsifies the feature.
    """
    acts = [e.activity for e in l.events]
    if a not in acts:
        return _bool(not strict)
    return _bool(all(i + 1 < len(acts) and acts[i + 1] == b for i, x in enumerate(acts) if x == a))


def eventually_follows(l: HasEvents, a: str, b: str) -> FeatureValue:
    """Every ``a`` has a later ``b`` (response); vacuously true without ``a``."""
    seen_b_after = False
    for e in reversed(l.events):
        if e.activity == b:
            seen_b_after = True
        elif e.activity == a and not seen_b_after:
            return _bool(False)
    return _bool(True)


def precedes(l: HasEvents, a: str, b: str) -> FeatureValue:
    """Every ``b`` has an earlier ``a`` (precedence); vacuously true without ``b``."""
    seen_a = False
    for e in l.events:
        if e.activity == b and not seen_a:
            return _bool(False)
        if e.activity == a:
            seen_a = True
    return _bool(True)


# --- temporal -----------------------------------------------------------


def wait_time(l: HasEvents, a: str, b: str) -> FeatureValue:
    """Hours from the last ``a`` to the first ``b`` after it."""
    events = l.events
    last_a = max((i for i, e in enumerate(events) if e.activity == a), default=None)
    if last_a is None:
        return UNDEFINED
    for e in events[last_a + 1 :]:
        if e.activity == b:
            return FeatureValue("numeric", _hours(events[last_a], e))
    return UNDEFINED


def cycle_time(l: HasEvents) -> FeatureValue:
    if not l.events:
        raise FeatureError("cycle_time of an empty prefix")
    return FeatureValue("numeric", _hours(l.events[0], l.events[-1]))


# --- payload ------------------------------------------------------------

PAYLOAD_AGGS = ("last", "first", "mean", "max", "min", "case")


def payload_feature(l: HasEvents, attr: str, agg: str = "last") -> FeatureValue:
    if agg not in PAYLOAD_AGGS:
        raise FeatureError(f"unknown aggregation {agg!r}")
    if agg == "case":
        v = l.case_attributes.get(attr)
        if v is None:
            return UNDEFINED
        return FeatureValue("numeric" if isinstance(v, float) else "categorical", v)
    values: list[AttrValue] = [e.attributes[attr] for e in l.events if attr in e.attributes]
    if not values:
        return UNDEFINED
    categorical = any(isinstance(v, str) for v in values)
    if categorical and agg in ("mean", "max", "min"):
        raise FeatureError(f"{agg} of categorical attribute {attr!r}")
    if agg == "last":
        v = values[-1]
    elif agg == "first":
        v = values[0]
    elif agg == "mean":
        v = sum(values) / len(values)  # type: ignore[arg-type]
    elif agg == "max":
        v = max(values)  # type: ignore[type-var]
    else:
        v = min(values)  # type: ignore[type-var]
    return FeatureValue("categorical" if categorical else "numeric", v)


# --- catalog ------------------------------------------------------------


@dataclass(frozen=True)
class FeatureDef:
    name: str
    fn: Callable[..., FeatureValue]
    kind: str
    arg_kinds: tuple[str, ...]  # "activity" | "attribute" | "agg"
    display: str


CATALOG: dict[str, FeatureDef] = {
    d.name: d
    for d in (
        FeatureDef("has_act", has_act, "boolean", ("activity",), "HasAct"),
        FeatureDef("is_next", is_next, "boolean", ("activity", "activity"), "IsNext"),
        FeatureDef("next", eventually_follows, "boolean", ("activity", "activity"), "Next"),
        FeatureDef("precedes", precedes, "boolean", ("activity", "activity"), "Precedes"),
        FeatureDef("wait_time", wait_time, "numeric", ("activity", "activity"), "WaitTime"),
        FeatureDef("cycle_time", cycle_time, "numeric", (), "CycleTime"),
        FeatureDef("payload", payload_feature, "numeric", ("attribute", "agg"), "Payload"),
        FeatureDef("occ_count", occ_count, "numeric", ("activity",), "OccCount"),
    )
}


def evaluate_feature(name: str, l: HasEvents, args: Sequence[str] = ()) -> FeatureValue:
    try:
        fdef = CATALOG[name]
    except KeyError:
        raise FeatureError(f"unknown feature {name!r}") from None
    return fdef.fn(l, *args)
