"""Rule DSL, compilation of rule templates to axioms, and the knowledge base.

One rule per line, ``#`` starts a comment, the ``<id>:`` prefix is optional::

    r1: response(Rev, Exam)
    r2: chain_response(Surg, PostCU) on all
    r3: if wait_time(Surg, ATB) > 2 and payload(age, case) > 60 on all then P
    r4: if payload(oxygen_sat, last) < 90 on positive then P
"""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from itertools import permutations
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tensor
from .eventlog import Trace
from .features import CATALOG, PAYLOAD_AGGS, eventually_follows, is_next, precedes
from .reallogic import (
    Axiom,
    Comparison,
    FeatureAtom,
    Forall,
    Formula,
    GroundingContext,
    Implies,
    Not,
    Predicate,
    And,
    atom_truth,
    atoms_of,
    conjunction,
    eval_body,
    ground_formula,
    mentions_predicate,
)

log = logging.getLogger(__name__)

DECLARE_TEMPLATES = {
    "existence": 1,
    "response": 2,
    "guarded_response": 2,
    "chain_response": 2,
    "precedence": 2,
    "not_coexistence": 2,
}
SCOPES = {"all": "all", "positive": "positive", "negative": "negative"}
TEMPORAL_FEATURES = {"wait_time", "cycle_time"}
CONDITION_FEATURES = {"wait_time", "cycle_time", "payload", "occ_count"}


class RuleParseError(ValueError):
    def __init__(self, diagnostics: Sequence[tuple[int, str]]):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(f"line {n}: {msg}" for n, msg in self.diagnostics))


class RuleCompileError(ValueError):
    pass


@dataclass(frozen=True)
class Condition:
    feature: str
    args: tuple[str, ...]
    op: str
    value: float | str

    def to_dsl(self) -> str:
        v = f"{self.value:g}" if isinstance(self.value, float) else self.value
        return f"{self.feature}({', '.join(self.args)}) {self.op} {v}"


@dataclass(frozen=True)
class RuleSpec:
    id: str
    category: str  # control_flow | temporal | payload
    template: str  # a Declare template name or "if_then"
    args: tuple[str, ...] = ()
    conditions: tuple[Condition, ...] = ()
    class_scope: str = "all"
    expected_effect: str = "none"  # implies_positive | implies_negative | none
    line: int = 0

    def to_dsl(self) -> str:
        if self.template == "if_then":
            cons = "P" if self.expected_effect == "implies_positive" else "not P"
            conds = " and ".join(c.to_dsl() for c in self.conditions)
            return f"{self.id}: if {conds} on {self.class_scope} then {cons}"
        return f"{self.id}: {self.template}({', '.join(self.args)}) on {self.class_scope}"


# --- parsing ------------------------------------------------------------

_ID = re.compile(r"^\s*([A-Za-z_][\w\-]*)\s*:\s*(.*)$")
_CALL = re.compile(r"^\s*([a-z_]+)\s*\(([^()]*)\)\s*(.*)$")
_IF = re.compile(r"^\s*if\s+(.*?)\s+(?:on\s+(\w+)\s+)?then\s+(not\s+P|P)\s*$")
_COND = re.compile(r"^\s*([a-z_]+)\s*\(([^()]*)\)\s*(>=|<=|>|<|=)\s*(\S+)\s*$")
_SCOPE_TAIL = re.compile(r"^on\s+(\w+)$")


def _split_args(text: str) -> tuple[str, ...]:
    text = text.strip()
    return tuple(a.strip() for a in text.split(",")) if text else ()


def _parse_value(text: str) -> float | str:
    try:
        return float(text)
    except ValueError:
        return text


class _LineError(Exception):
    pass


def _check_activity(a: str, activities) -> None:
    if not a:
        raise _LineError("empty activity name")
    if activities is not None and a not in activities:
        raise _LineError(f"unknown activity {a!r}")


def _parse_condition(text: str, activities, attributes) -> Condition:
    m = _COND.match(text)
    if not m:
        raise _LineError(f"malformed condition {text.strip()!r}")
    feat, args, op, value = m[1], _split_args(m[2]), m[3], _parse_value(m[4])
    if feat not in CONDITION_FEATURES:
        raise _LineError(f"unknown feature {feat!r}")
    kinds = CATALOG[feat].arg_kinds
    if len(args) != len(kinds):
        raise _LineError(f"{feat} takes {len(kinds)} argument(s), got {len(args)}")
    for a, kind in zip(args, kinds):
        if kind == "activity":
            _check_activity(a, activities)
        elif kind == "agg" and a not in PAYLOAD_AGGS:
            raise _LineError(f"unknown aggregation {a!r}")
        elif kind == "attribute" and attributes is not None and a not in attributes:
            raise _LineError(f"unknown attribute {a!r}")
    if isinstance(value, str) and (feat != "payload" or op != "="):
        raise _LineError(f"non-numeric constant {value!r} only allowed with payload(...) = value")
    return Condition(feat, args, op, value)


def _parse_line(body: str, rid: str, lineno: int, activities, attributes) -> RuleSpec:
    m = _IF.match(body)
    if m:
        scope = m[2] or "all"
        if scope not in SCOPES:
            raise _LineError(f"unknown class scope {scope!r}")
        conds = tuple(
            _parse_condition(part, activities, attributes) for part in re.split(r"\s+and\s+", m[1])
        )
        feats = {c.feature for c in conds}
        category = (
            "temporal" if feats & TEMPORAL_FEATURES else "payload" if "payload" in feats else "control_flow"
        )
        effect = "implies_positive" if m[3] == "P" else "implies_negative"
        return RuleSpec(rid, category, "if_then", (), conds, scope, effect, lineno)
    m = _CALL.match(body)
    if not m:
        raise _LineError(f"cannot parse rule {body.strip()!r}")
    template, args, tail = m[1], _split_args(m[2]), m[3].strip()
    if template not in DECLARE_TEMPLATES:
        raise _LineError(f"unknown template {template!r}")
    if len(args) != DECLARE_TEMPLATES[template]:
        raise _LineError(f"{template} takes {DECLARE_TEMPLATES[template]} argument(s), got {len(args)}")
    for a in args:
        _check_activity(a, activities)
    scope = "all"
    if tail:
        st = _SCOPE_TAIL.match(tail)
        if not st or st[1] not in SCOPES:
            raise _LineError(f"unexpected trailing text {tail!r}")
        scope = st[1]
    return RuleSpec(rid, "control_flow", template, args, (), scope, "none", lineno)


def parse_rules(
    text: str,
    activities: Iterable[str] | None = None,
    attributes: Iterable[str] | None = None,
) -> list[RuleSpec]:
    """Parse DSL text.  All problems are collected and raised together."""
    acts = set(activities) if activities is not None else None
    attrs = set(attributes) if attributes is not None else None
    specs: list[RuleSpec] = []
    errors: list[tuple[int, str]] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        rid, body = f"r{lineno}", line
        m = _ID.match(line)
        if m and not line.startswith("if "):
            rid, body = m[1], m[2]
        if rid in seen:
            errors.append((lineno, f"duplicate rule id {rid!r}"))
            continue
        try:
            spec = _parse_line(body, rid, lineno, acts, attrs)
        except _LineError as exc:
            errors.append((lineno, str(exc)))
            continue
        seen.add(rid)
        specs.append(spec)
    if errors:
        raise RuleParseError(errors)
    return specs


def format_rules(specs: Iterable[RuleSpec]) -> str:
    return "".join(s.to_dsl() + "\n" for s in specs)


# --- compilation --------------------------------------------------------


def _has(a: str) -> FeatureAtom:
    return FeatureAtom("has_act", (a,))


def _condition_atom(c: Condition) -> Comparison:
    return Comparison(c.feature, c.args, c.op, c.value)


def compile_rule(spec: RuleSpec) -> Axiom:
    """Expand a rule into a quantified formula.

    Declare templates follow the conjunctive translation (``response(a, b)``
    becomes ``∀l(HasAct(l, a) ∧ Next(l, a, b))``); ``guarded_response`` is the
    implication form.  IF-THEN rules become ``∀l_c(antecedent → [¬]P(l_c))``.
    """
    t, a = spec.template, spec.args
    body: Formula
    if t == "if_then":
        if not spec.conditions:
            raise RuleCompileError(f"{spec.id}: IF-THEN rule without conditions")
        antecedent = conjunction([_condition_atom(c) for c in spec.conditions])
        consequent: Formula = Predicate() if spec.expected_effect == "implies_positive" else Not(Predicate())
        body = Implies(antecedent, consequent)
    elif t == "existence":
        body = _has(a[0])
    elif t == "response":
        body = And(_has(a[0]), FeatureAtom("next", (a[0], a[1])))
    elif t == "guarded_response":
        body = Implies(_has(a[0]), FeatureAtom("next", (a[0], a[1])))
    elif t == "chain_response":
        body = And(_has(a[0]), FeatureAtom("is_next", (a[0], a[1])))
    elif t == "precedence":
        body = FeatureAtom("precedes", (a[0], a[1]))
    elif t == "not_coexistence":
        body = Not(And(_has(a[0]), _has(a[1])))
    else:
        raise RuleCompileError(f"{spec.id}: unknown template {t!r}")
    if spec.expected_effect != "none" and not mentions_predicate(body):
        raise RuleCompileError(
            f"{spec.id}: rule declares effect {spec.expected_effect} but never mentions P"
        )
    return Axiom(spec.id, Forall(spec.class_scope, body), "knowledge", spec.category)


DATA_AXIOMS = (
    Axiom("data_pos", Forall("positive", Predicate()), "data", "data"),
    Axiom("data_neg", Forall("negative", Not(Predicate())), "data", "data"),
)


@dataclass(frozen=True)
class KnowledgeBase:
    data: tuple[Axiom, ...] = DATA_AXIOMS
    knowledge: tuple[Axiom, ...] = ()
    pruned: tuple[Axiom, ...] = ()
    specs: tuple[RuleSpec, ...] = ()

    def __post_init__(self):
        kept = {a.id for a in self.knowledge}
        if any(a.id not in kept for a in self.pruned):
            raise ValueError("pruned axioms must be a subset of the knowledge axioms")

    def with_pruned(self, kept_ids: Iterable[str]) -> "KnowledgeBase":
        keep = set(kept_ids)
        return replace(self, pruned=tuple(a for a in self.knowledge if a.id in keep))

    def spec(self, rule_id: str) -> RuleSpec | None:
        return next((s for s in self.specs if s.id == rule_id), None)

    @property
    def all_axioms(self) -> tuple[Axiom, ...]:
        return self.data + self.knowledge

    def atoms(self):
        seen: dict = {}
        for ax in self.all_axioms:
            for at in atoms_of(ax.formula):
                seen.setdefault(at)
        return list(seen)


def build_kb(specs: Sequence[RuleSpec]) -> KnowledgeBase:
    if not specs:
        log.warning("no knowledge rules: training reduces to data axioms only")
    axioms = tuple(compile_rule(s) for s in specs)
    return KnowledgeBase(DATA_AXIOMS, axioms, (), tuple(specs))


def load_rules(path, activities=None, attributes=None) -> KnowledgeBase:
    with open(path, encoding="utf-8") as fh:
        return build_kb(parse_rules(fh.read(), activities, attributes))


# --- crisp checking -----------------------------------------------------


def _crisp_context(trace, atoms) -> GroundingContext:
    label = 0 if trace.label is None else trace.label
    table = {a: np.array([atom_truth(a, trace)]) for a in atoms}
    return GroundingContext(np.array([label]), table, Tensor(np.array([float(label)])))


@dataclass
class ComplianceResult:
    per_rule: dict[str, bool] = field(default_factory=dict)
    fired: dict[str, bool] = field(default_factory=dict)

    @property
    def overall(self) -> bool:
        return all(self.per_rule.values())


def crisp_trace_compliance(trace: Trace, kb: KnowledgeBase) -> ComplianceResult:
    """Check each knowledge rule on the full trace with P pinned to the true label.

    A rule whose class scope excludes the trace's label is satisfied.
    ``fired`` records whether an IF-THEN antecedent holds on the trace.
    """
    res = ComplianceResult()
    for ax in kb.knowledge:
        ctx = _crisp_context(trace, atoms_of(ax.formula))
        g = ground_formula(ax, ctx)
        res.per_rule[ax.id] = bool(g.vacuous or g.per_sample.data[0] == 1.0)
        body = ax.body
        if isinstance(body, Implies) and mentions_predicate(body.consequent) and not g.vacuous:
            res.fired[ax.id] = bool(eval_body(body.antecedent, ctx).data[0] == 1.0)
    return res


def is_compliant(trace: Trace, kb: KnowledgeBase) -> bool:
    """Satisfies every rule and at least one IF-THEN rule actually fires.

    A trace on which no rule fires carries no rule-implied label, so it does
    not count as compliant for test-set enrichment.
    """
    res = crisp_trace_compliance(trace, kb)
    return res.overall and any(res.fired.values())


# --- heuristic suggestions ----------------------------------------------


@dataclass(frozen=True)
class Suggestion:
    template: str
    args: tuple[str, ...]
    support: int
    confidence: float

    def to_dsl(self, rid: str) -> str:
        return f"{rid}: {self.template}({', '.join(self.args)})  # support={self.support} confidence={self.confidence:.3f}"


def suggest_rules(
    traces: Sequence[Trace], min_support: int = 10, min_confidence: float = 0.95
) -> list[Suggestion]:
    """Frequency heuristic over binary Declare templates; not a mining algorithm.

    Support counts traces where the template is non-vacuous (the activating
    activity occurs); confidence is the satisfied share of those traces.
    """
    acts = sorted({e.activity for t in traces for e in t.events})
    present = [set(t.activities) for t in traces]
    checks = {
        "response": (lambda t, a, b: eventually_follows(t, a, b).value, 0),
        "chain_response": (lambda t, a, b: is_next(t, a, b).value, 0),
        "precedence": (lambda t, a, b: precedes(t, a, b).value, 1),
    }
    out: list[Suggestion] = []
    for a, b in permutations(acts, 2):
        for name, (fn, activator) in checks.items():
            act = (a, b)[activator]
            active = [t for t, p in zip(traces, present) if act in p]
            if len(active) < min_support:
                continue
            ok = sum(fn(t, a, b) for t in active)
            conf = ok / len(active)
            if conf >= min_confidence:
                out.append(Suggestion(name, (a, b), len(active), conf))
    freq = Counter(a for p in present for a in p)
    for a in acts:
        if freq[a] >= min_support and freq[a] / len(traces) >= min_confidence:
            out.append(Suggestion("existence", (a,), freq[a], freq[a] / len(traces)))
    out.sort(key=lambda s: (-s.confidence, -s.support, s.template, s.args))
    return out
