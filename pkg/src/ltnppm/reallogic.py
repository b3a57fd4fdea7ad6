"""Differentiable Real Logic over batches of prefixes.

Formulas are small immutable ASTs with a single outermost quantifier whose
domain selects all prefixes, the positive ones or the negative ones.  Bodies
are grounded to per-sample truth tensors: feature atoms are crisp constants,
the predicate atom is the neural model's output.  Universal quantification
aggregates with pMeanError, existential with pMean.
"""

from __future__ import annotations

import math
import operator
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .features import CATALOG, evaluate_feature

DOMAINS = ("all", "positive", "negative")
COMPARISON_OPS: dict[str, Callable[[float, float], bool]] = {
    ">": operator.gt,
    ">=": operator.ge,
    "<": operator.lt,
    "<=": operator.le,
    "=": operator.eq,
}


class LogicError(ValueError):
    pass


class NoEvaluableAxioms(RuntimeError):
    """Every axiom handed to an aggregation had an empty domain in the batch."""


# --- AST ----------------------------------------------------------------


@dataclass(frozen=True)
class Predicate:
    name: str = "P"


@dataclass(frozen=True)
class FeatureAtom:
    """Boolean feature such as ``HasAct(l, Rev)``; crisp in {0, 1}."""

    feature: str
    args: tuple[str, ...] = ()


@dataclass(frozen=True)
class Comparison:
    """``feature(l, args) <op> value``; false when the feature is undefined."""

    feature: str
    args: tuple[str, ...]
    op: str
    value: float | str

    def __post_init__(self):
        if self.op not in COMPARISON_OPS:
            raise LogicError(f"unknown comparison operator {self.op!r}")


@dataclass(frozen=True)
class Not:
    operand: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Implies:
    antecedent: "Formula"
    consequent: "Formula"


@dataclass(frozen=True)
class Iff:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Forall:
    domain: str
    body: "Formula"

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise LogicError(f"unknown quantifier domain {self.domain!r}")


@dataclass(frozen=True)
class Exists:
    domain: str
    body: "Formula"

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise LogicError(f"unknown quantifier domain {self.domain!r}")


Atom = Union[FeatureAtom, Comparison]
Formula = Union[Predicate, FeatureAtom, Comparison, Not, And, Or, Implies, Iff, Forall, Exists]
Quantified = Union[Forall, Exists]


@dataclass(frozen=True)
class Axiom:
    id: str
    formula: Quantified
    partition: str = "knowledge"  # data | knowledge
    provenance: str = "data"  # control_flow | temporal | payload | data

    def __post_init__(self):
        if not isinstance(self.formula, (Forall, Exists)):
            raise LogicError(f"axiom {self.id}: formula must start with a quantifier")
        if any(isinstance(n, (Forall, Exists)) for n in walk(self.formula.body)):
            raise LogicError(f"axiom {self.id}: nested quantifiers are not supported")
        if self.partition not in ("data", "knowledge"):
            raise LogicError(f"axiom {self.id}: unknown partition {self.partition!r}")

    @property
    def domain(self) -> str:
        return self.formula.domain

    @property
    def body(self) -> Formula:
        return self.formula.body


def walk(node: Formula) -> Iterator[Formula]:
    yield node
    if isinstance(node, Not):
        yield from walk(node.operand)
    elif isinstance(node, (And, Or, Iff)):
        yield from walk(node.left)
        yield from walk(node.right)
    elif isinstance(node, Implies):
        yield from walk(node.antecedent)
        yield from walk(node.consequent)
    elif isinstance(node, (Forall, Exists)):
        yield from walk(node.body)


def atoms_of(formula: Formula) -> list[Atom]:
    seen: dict[Atom, None] = {}
    for n in walk(formula):
        if isinstance(n, (FeatureAtom, Comparison)):
            seen.setdefault(n)
    return list(seen)


def mentions_predicate(formula: Formula) -> bool:
    return any(isinstance(n, Predicate) for n in walk(formula))


def conjunction(parts: Sequence[Formula]) -> Formula:
    if not parts:
        raise LogicError("empty conjunction")
    out = parts[0]
    for p in parts[1:]:
        out = And(out, p)
    return out


# --- printing -----------------------------------------------------------

_VARS = {"all": "l", "positive": "l₊", "negative": "l₋"}
_FOL_OPS = {">": ">", ">=": "≥", "<": "<", "<=": "≤", "=": "="}


def _num(v: float | str) -> str:
    return f"{v:g}" if isinstance(v, (int, float)) else str(v)


def _atom_text(atom: Atom, var: str) -> str:
    if isinstance(atom, Comparison) and atom.feature == "payload" and atom.args[1:] == ("case",):
        head = f"{atom.args[0][:1].upper()}{atom.args[0][1:]}({var})"
    else:
        display = CATALOG[atom.feature].display if atom.feature in CATALOG else atom.feature
        head = f"{display}({', '.join((var, *atom.args))})"
    if isinstance(atom, Comparison):
        return f"{head} {_FOL_OPS[atom.op]} {_num(atom.value)}"
    return head


def to_fol(node: Formula, var: str = "l", top: bool = True) -> str:
    """Render a formula in first-order notation, e.g. ``∀l₊(A(l₊) → P(l₊))``."""
    if isinstance(node, (Forall, Exists)):
        v = _VARS[node.domain]
        q = "∀" if isinstance(node, Forall) else "∃"
        return f"{q}{v}({to_fol(node.body, v, top=True)})"
    if isinstance(node, Predicate):
        return f"{node.name}({var})"
    if isinstance(node, (FeatureAtom, Comparison)):
        return _atom_text(node, var)
    if isinstance(node, Not):
        return f"¬{to_fol(node.operand, var, top=False)}"
    if isinstance(node, Implies):
        l, r, sym = node.antecedent, node.consequent, "→"
    elif isinstance(node, And):
        l, r, sym = node.left, node.right, "∧"
    elif isinstance(node, Or):
        l, r, sym = node.left, node.right, "∨"
    elif isinstance(node, Iff):
        l, r, sym = node.left, node.right, "↔"
    else:
        raise LogicError(f"cannot print {node!r}")
    text = f"{to_fol(l, var, top=False)} {sym} {to_fol(r, var, top=False)}"
    return text if top else f"({text})"


# --- fuzzy semantics ----------------------------------------------------


class Semantics:
    """Connective operators; subclasses fix a t-norm family."""

    name = "abstract"

    def not_(self, a: Tensor) -> Tensor:
        return 1.0 - a

    def and_(self, a: Tensor, b: Tensor) -> Tensor:
        raise NotImplementedError

    def or_(self, a: Tensor, b: Tensor) -> Tensor:
        raise NotImplementedError

    def implies(self, a: Tensor, b: Tensor) -> Tensor:
        raise NotImplementedError

    def iff(self, a: Tensor, b: Tensor) -> Tensor:
        return self.and_(self.implies(a, b), self.implies(b, a))


class ProductSemantics(Semantics):
    """Product t-norm, probabilistic sum, Reichenbach implication."""

    name = "product"

    def and_(self, a, b):
        return a * b

    def or_(self, a, b):
        return a + b - a * b

    def implies(self, a, b):
        return 1.0 - a + a * b


class LukasiewiczSemantics(Semantics):
    name = "lukasiewicz"

    def and_(self, a, b):
        return ad.maximum(a + b - 1.0, 0.0)

    def or_(self, a, b):
        return ad.minimum(a + b, 1.0)

    def implies(self, a, b):
        return ad.minimum(1.0 - a + b, 1.0)


class GodelSemantics(Semantics):
    name = "godel"

    def and_(self, a, b):
        return ad.minimum(a, b)

    def or_(self, a, b):
        return ad.maximum(a, b)

    def implies(self, a, b):
        a, b = ad._wrap(a), ad._wrap(b)
        holds = (a.data <= b.data).astype(float)
        return holds + (1.0 - holds) * b


PRODUCT = ProductSemantics()
SEMANTICS: dict[str, Semantics] = {
    s.name: s for s in (PRODUCT, LukasiewiczSemantics(), GodelSemantics())
}


def eval_connective(kind: str, *operands, semantics: Semantics = PRODUCT) -> Tensor:
    """Apply ``not``/``and``/``or``/``implies``/``iff`` to equally shaped truth tensors."""
    ts = [ad._wrap(o) for o in operands]
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError(kind, ts[0].shape, t.shape)
    arity = 1 if kind == "not" else 2
    if len(ts) != arity:
        raise LogicError(f"{kind} takes {arity} operand(s), got {len(ts)}")
    if kind == "not":
        return semantics.not_(ts[0])
    fn = {"and": semantics.and_, "or": semantics.or_, "implies": semantics.implies,
          "iff": semantics.iff}.get(kind)
    if fn is None:
        raise LogicError(f"unknown connective {kind!r}")
    return fn(ts[0], ts[1])


# --- aggregators --------------------------------------------------------


def _check_agg(u: Tensor, p: float) -> None:
    if u.size == 0:
        raise LogicError("aggregation over an empty set of truth values")
    if p < 1:
        raise LogicError(f"aggregator exponent must be >= 1, got {p}")


def p_mean_error(u, p: float = 2.0) -> Tensor:
    """Universal quantifier: ``1 - (mean((1 - u)^p))^(1/p)``."""
    u = ad._wrap(u)
    _check_agg(u, p)
    return 1.0 - ((1.0 - u) ** p).mean() ** (1.0 / p)


def p_mean(u, p: float = 2.0) -> Tensor:
    """Existential quantifier: ``(mean(u^p))^(1/p)``."""
    u = ad._wrap(u)
    _check_agg(u, p)
    return (u**p).mean() ** (1.0 / p)


# --- grounding ----------------------------------------------------------


def atom_truth(atom: Atom, prefix, smooth_temperature: float | None = None) -> float:
    """Truth of a feature atom on one prefix.

    Comparisons over undefined features are false.  With a temperature the
    ordering comparisons become ``sigmoid(±(value - c) / T)``.
    """
    fv = evaluate_feature(atom.feature, prefix, atom.args)
    if isinstance(atom, FeatureAtom):
        return float(fv.value) if fv.defined else 0.0
    if not fv.defined:
        return 0.0
    v, c = fv.value, atom.value
    if isinstance(v, str) or isinstance(c, str):
        return 1.0 if atom.op == "=" and str(v) == str(c) else 0.0
    if smooth_temperature and atom.op != "=":
        sign = 1.0 if atom.op in (">", ">=") else -1.0
        return 1.0 / (1.0 + math.exp(-sign * (float(v) - float(c)) / smooth_temperature))
    return 1.0 if COMPARISON_OPS[atom.op](float(v), float(c)) else 0.0


@dataclass
class Grounding:
    axiom_id: str
    per_sample: Tensor | None  # body truths restricted to the domain
    aggregated: Tensor | None  # quantifier applied
    indices: np.ndarray  # batch positions in the domain
    vacuous: bool


@dataclass
class GroundingContext:
    """Everything needed to ground formulas on one batch.

    ``atoms`` maps each feature atom to its per-sample truths; ``predictions``
    is the predicate output tensor or a callable producing it (evaluated once).
    """

    labels: np.ndarray
    atoms: Mapping[Atom, np.ndarray] | Callable[[Atom], np.ndarray]
    predictions: Tensor | Callable[[], Tensor] | None = None
    semantics: Semantics = PRODUCT
    p: float = 2.0
    cache: dict[str, Grounding] = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)

    @property
    def size(self) -> int:
        return len(self.labels)

    def predicate(self) -> Tensor:
        if callable(self.predictions):
            self.predictions = self.predictions()
        if self.predictions is None:
            raise LogicError("formula uses the predicate but no predictions were supplied")
        return self.predictions

    def atom(self, a: Atom) -> np.ndarray:
        return self.atoms(a) if callable(self.atoms) else self.atoms[a]

    def domain_indices(self, domain: str) -> np.ndarray:
        if domain == "all":
            return np.arange(self.size)
        target = 1 if domain == "positive" else 0
        return np.flatnonzero(self.labels == target)


def eval_body(node: Formula, ctx: GroundingContext) -> Tensor:
    """Per-sample truth of a quantifier-free formula over the whole batch."""
    sem = ctx.semantics
    if isinstance(node, Predicate):
        return ctx.predicate()
    if isinstance(node, (FeatureAtom, Comparison)):
        return Tensor(ctx.atom(node))
    if isinstance(node, Not):
        return eval_connective("not", eval_body(node.operand, ctx), semantics=sem)
    if isinstance(node, And):
        return eval_connective("and", eval_body(node.left, ctx), eval_body(node.right, ctx), semantics=sem)
    if isinstance(node, Or):
        return eval_connective("or", eval_body(node.left, ctx), eval_body(node.right, ctx), semantics=sem)
    if isinstance(node, Implies):
        return eval_connective(
            "implies", eval_body(node.antecedent, ctx), eval_body(node.consequent, ctx), semantics=sem
        )
    if isinstance(node, Iff):
        return eval_connective("iff", eval_body(node.left, ctx), eval_body(node.right, ctx), semantics=sem)
    raise LogicError(f"quantifier inside a formula body: {node!r}")


def ground_formula(axiom: Axiom, ctx: GroundingContext) -> Grounding:
    """Ground an axiom on the batch.  Empty domains are flagged vacuous, not true."""
    if axiom.id in ctx.cache:
        return ctx.cache[axiom.id]
    idx = ctx.domain_indices(axiom.domain)
    if idx.size == 0:
        g = Grounding(axiom.id, None, None, idx, vacuous=True)
    else:
        body = eval_body(axiom.body, ctx)
        if body.shape != (ctx.size,):
            body = body.broadcast_to((ctx.size,))
        per_sample = body if idx.size == ctx.size else body.take(idx)
        agg = p_mean_error if isinstance(axiom.formula, Forall) else p_mean
        g = Grounding(axiom.id, per_sample, agg(per_sample, ctx.p), idx, vacuous=False)
    ctx.cache[axiom.id] = g
    return g


def sat_agg(axioms: Iterable[Axiom], ctx: GroundingContext) -> Tensor:
    """pMeanError over the satisfactions of the axioms evaluable on this batch."""
    sats = [g.aggregated for g in (ground_formula(a, ctx) for a in axioms) if not g.vacuous]
    if not sats:
        raise NoEvaluableAxioms("no axiom has a nonempty domain in this batch")
    if len(sats) == 1:
        return p_mean_error(sats[0].reshape((1,)), ctx.p)
    return p_mean_error(ad.stack(sats), ctx.p)
