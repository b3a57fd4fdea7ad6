"""Two-stage optimization with rule pruning, and the baseline trainers.

Phase 1 minimises ``1 - (alpha * SatAgg(K_D) + beta * SatAgg(K_P))`` for
``ep`` epochs.  Each knowledge rule is then scored on the validation prefixes
by ``g = mean(s) * exp(-lam * var(s))`` over its per-sample body truths, and
rules with ``g >= tau`` form the pruned set.  Phase 2 fine-tunes for ``ef``
epochs on the data axioms plus the pruned rules: jointly for the temporal
protocol, with the weighted loss for the compliance-aware one.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .eventlog import Prefix, Trace, generate_prefixes
from .evaluation.metrics import compute_metrics
from .model import EncoderConfig, FeatureSpace, PredicateModel, PrefixTable
from .reallogic import (
    SEMANTICS,
    Atom,
    Axiom,
    GroundingContext,
    NoEvaluableAxioms,
    atom_truth,
    ground_formula,
    sat_agg,
)
from .rules import KnowledgeBase

log = logging.getLogger(__name__)

VARIANTS = ("bce_baseline", "ltn_data", "ltn_nop", "two_stage")
BCE_EPS = 1e-6


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_good: dict[str, np.ndarray] | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "two_stage"
    alpha: float = 0.8
    beta: float = 0.2
    ep: int = 5
    ef: int = 50
    lam: float = 1.0
    tau: float | str = "auto"
    tau_grid: tuple[float, ...] | None = None
    p: float = 2.0
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    mode: str = "temporal"
    phase2_alpha: float | None = None
    phase2_beta: float | None = None
    semantics: str = "product"
    smooth_temperature: float | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if abs(self.alpha + self.beta - 1.0) > 1e-9:
            raise ConfigError(f"alpha + beta must equal 1 (got {self.alpha} + {self.beta})")
        if min(self.alpha, self.beta) < 0:
            raise ConfigError("alpha and beta must be nonnegative")
        a2, b2 = self.phase2_weights
        if abs(a2 + b2 - 1.0) > 1e-9:
            raise ConfigError("phase-2 alpha + beta must equal 1")
        if self.variant == "two_stage" and (self.ep < 1 or self.ef < 1):
            raise ConfigError("two-stage training needs ep >= 1 and ef >= 1")
        if self.ep < 0 or self.ef < 0:
            raise ConfigError("epoch counts must be nonnegative")
        if self.mode not in ("temporal", "compliance_aware"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.p < 1:
            raise ConfigError("aggregator exponent p must be >= 1")
        if not (self.tau == "auto" or isinstance(self.tau, (int, float))):
            raise ConfigError("tau must be a number or 'auto'")
        if self.semantics not in SEMANTICS:
            raise ConfigError(f"unknown semantics {self.semantics!r}")
        if self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("batch_size must be >= 1 and lr > 0")

    @property
    def phase2_weights(self) -> tuple[float, float]:
        return (
            self.alpha if self.phase2_alpha is None else self.phase2_alpha,
            self.beta if self.phase2_beta is None else self.phase2_beta,
        )

    @property
    def total_epochs(self) -> int:
        return self.ep + self.ef

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tau_grid"] = list(self.tau_grid) if self.tau_grid is not None else None
        return d


# --- data ---------------------------------------------------------------


class PrefixData:
    """Prefixes with labels, model encodings and crisp truths of every feature atom."""

    def __init__(
        self,
        traces: Sequence[Trace],
        space: FeatureSpace,
        atoms: Sequence[Atom],
        min_len: int = 2,
        max_len: int | None = None,
        smooth_temperature: float | None = None,
    ):
        self.traces = list(traces)
        self.prefixes: list[Prefix] = generate_prefixes(self.traces, min_len, max_len)
        self.labels = np.array([p.label for p in self.prefixes], dtype=int)
        self.table = PrefixTable(self.traces, self.prefixes, space) if self.prefixes else None
        self.atoms: dict[Atom, np.ndarray] = {}
        self.smooth_temperature = smooth_temperature
        self.add_atoms(atoms)

    def add_atoms(self, atoms: Sequence[Atom]) -> None:
        for a in atoms:
            if a not in self.atoms:
                self.atoms[a] = np.array(
                    [atom_truth(a, p, self.smooth_temperature) for p in self.prefixes], dtype=float
                )

    def __len__(self) -> int:
        return len(self.prefixes)

    def context(self, idx: np.ndarray, predictions, p: float = 2.0, semantics: str = "product") -> GroundingContext:
        return GroundingContext(
            labels=self.labels[idx],
            atoms=lambda a: self.atoms[a][idx],
            predictions=predictions,
            semantics=SEMANTICS[semantics],
            p=p,
        )


def predict(model: PredicateModel, data: PrefixData, batch_size: int = 512) -> np.ndarray:
    out = np.empty(len(data))
    for s in range(0, len(data), batch_size):
        idx = np.arange(s, min(s + batch_size, len(data)))
        out[idx] = model(data.table.batch(idx)).data
    return out


# --- losses -------------------------------------------------------------


def ltn_loss(axioms: Sequence[Axiom]) -> Callable[[GroundingContext], Tensor]:
    def fn(ctx: GroundingContext) -> Tensor:
        return 1.0 - sat_agg(axioms, ctx)

    return fn


def weighted_loss(
    ctx: GroundingContext,
    data_axioms: Sequence[Axiom],
    knowledge_axioms: Sequence[Axiom],
    alpha: float,
    beta: float,
) -> Tensor:
    """``1 - (alpha * SatAgg(K_D) + beta * SatAgg(K_P))``.

    Reduces to ``1 - SatAgg(K_D)`` when there are no knowledge axioms, when
    ``beta`` is zero, or when none of them is evaluable on the batch.
    """
    sd = sat_agg(data_axioms, ctx)
    if not knowledge_axioms or beta == 0:
        return 1.0 - sd
    try:
        sk = sat_agg(knowledge_axioms, ctx)
    except NoEvaluableAxioms:
        return 1.0 - sd
    return 1.0 - (alpha * sd + beta * sk)


def bce_loss(ctx: GroundingContext) -> Tensor:
    p = ctx.predicate().clamp(BCE_EPS, 1.0 - BCE_EPS)
    y = ctx.labels.astype(float)
    return -(y * p.log() + (1.0 - y) * (1.0 - p).log()).mean()


# --- records ------------------------------------------------------------


@dataclass
class EpochRecord:
    phase: str
    epoch: int  # global, 1-based
    loss: float
    satisfaction: dict[str, float]


@dataclass
class GatingRecord:
    rule_id: str
    mean: float
    var: float
    g: float
    kept: bool = False
    n_samples: int = 0
    vacuous: bool = False
    samples: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    def to_dict(self) -> dict:
        return {"rule_id": self.rule_id, "mean": self.mean, "var": self.var, "g": self.g,
                "kept": self.kept, "n_samples": self.n_samples, "vacuous": self.vacuous}


@dataclass
class TrainResult:
    variant: str
    model: PredicateModel
    config: TrainConfig
    kb: KnowledgeBase
    history: list[EpochRecord] = field(default_factory=list)
    gating: list[GatingRecord] = field(default_factory=list)
    tau: float | None = None
    tau_search: list[dict] = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.history)

    def pruning_report(self) -> dict:
        return {
            "variant": self.variant,
            "tau": self.tau,
            "lambda": self.config.lam,
            "rules": [r.to_dict() for r in self.gating],
            "kept": [a.id for a in self.kb.pruned],
            "tau_search": self.tau_search,
        }

    def write_pruning_report(self, path) -> None:
        Path(path).write_text(json.dumps(self.pruning_report(), indent=2))

    def write_satisfaction_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "phase", "axiom_id", "mean_sat"])
            for rec in self.history:
                for aid, s in rec.satisfaction.items():
                    w.writerow([rec.epoch, rec.phase, aid, repr(s)])


# --- loops --------------------------------------------------------------


class _Run:
    """Mutable training state: model, optimizer state, shuffle stream, history."""

    def __init__(self, model: PredicateModel, config: TrainConfig, shuffle: np.random.Generator):
        self.model = model
        self.config = config
        self.shuffle = shuffle
        self.adam = AdamState()
        self.history: list[EpochRecord] = []

    def epochs(self, data: PrefixData, loss_fn, n: int, phase: str, log_axioms: Sequence[Axiom] = ()) -> None:
        cfg = self.config
        params = self.model.parameters()
        for _ in range(n):
            last_good = self.model.snapshot()
            order = self.shuffle.permutation(len(data))
            losses: list[float] = []
            sat_sum: dict[str, float] = {}
            sat_n: dict[str, int] = {}
            for s in range(0, len(order), cfg.batch_size):
                idx = order[s : s + cfg.batch_size]
                enc = data.table.batch(idx)
                ctx = data.context(idx, lambda enc=enc: self.model(enc), cfg.p, cfg.semantics)
                loss = loss_fn(ctx)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingAborted(
                        f"{phase}: non-finite loss at epoch {len(self.history) + 1}", last_good
                    )
                ad.zero_grad(params)
                ad.backward(loss)
                ad.adam_step(params, [p.grad for p in params], self.adam, cfg.lr)
                losses.append(value)
                for ax in log_axioms:
                    g = ground_formula(ax, ctx)
                    if not g.vacuous:
                        sat_sum[ax.id] = sat_sum.get(ax.id, 0.0) + g.aggregated.item()
                        sat_n[ax.id] = sat_n.get(ax.id, 0) + 1
            self.history.append(
                EpochRecord(
                    phase,
                    len(self.history) + 1,
                    float(np.mean(losses)),
                    {k: sat_sum[k] / sat_n[k] for k in sat_sum},
                )
            )
            log.debug("%s epoch %d loss %.5f", phase, len(self.history), self.history[-1].loss)


def _seed_streams(seed: int) -> dict[str, np.random.SeedSequence]:
    init, shuffle, tau = ad.spawn_seeds(seed, 3)
    return {"init": init, "shuffle": shuffle, "tau": tau}


def _new_run(config: TrainConfig, space: FeatureSpace) -> _Run:
    streams = _seed_streams(config.seed)
    model = PredicateModel.create(config.encoder, space, streams["init"])
    return _Run(model, config, ad.make_rng(streams["shuffle"]))


def pretrain(run: _Run, data: PrefixData, kb: KnowledgeBase) -> None:
    cfg = run.config

    def loss(ctx):
        return weighted_loss(ctx, kb.data, kb.knowledge, cfg.alpha, cfg.beta)

    run.epochs(data, loss, cfg.ep, "pretrain", kb.all_axioms)


def compute_gating(
    kb: KnowledgeBase, data: PrefixData, model: PredicateModel, lam: float, p: float = 2.0,
    semantics: str = "product",
) -> list[GatingRecord]:
    """Score each knowledge rule from its per-sample body truths on ``data``."""
    data.add_atoms(kb.atoms())
    if len(data) == 0:
        return [GatingRecord(a.id, 0.0, 0.0, 0.0, n_samples=0, vacuous=True) for a in kb.knowledge]
    preds = Tensor(predict(model, data))
    ctx = data.context(np.arange(len(data)), preds, p, semantics)
    records = []
    for ax in kb.knowledge:
        g = ground_formula(ax, ctx)
        if g.vacuous:
            records.append(GatingRecord(ax.id, 0.0, 0.0, 0.0, n_samples=0, vacuous=True))
            continue
        s = g.per_sample.data.copy()
        mean, var = float(s.mean()), float(s.var())
        records.append(GatingRecord(ax.id, mean, var, mean * math.exp(-lam * var), n_samples=s.size, samples=s))
    return records


def prune(kb: KnowledgeBase, records: Sequence[GatingRecord], tau: float) -> tuple[KnowledgeBase, list[GatingRecord]]:
    """Keep rules with ``g >= tau``."""
    marked = [replace(r, kept=r.g >= tau) for r in records]
    return kb.with_pruned(r.rule_id for r in marked if r.kept), marked


def finetune(run: _Run, data: PrefixData, kb: KnowledgeBase, epochs: int | None = None) -> None:
    cfg = run.config
    n = cfg.ef if epochs is None else epochs
    if cfg.mode == "compliance_aware":
        a2, b2 = cfg.phase2_weights

        def loss(ctx):
            return weighted_loss(ctx, kb.data, kb.pruned, a2, b2)

    else:
        loss = ltn_loss(kb.data + kb.pruned)
    run.epochs(data, loss, n, "finetune", kb.all_axioms)


def default_tau_grid(records: Sequence[GatingRecord]) -> list[float]:
    """Zero plus every observed gating score: each candidate is a distinct cut."""
    return sorted({0.0, *(r.g for r in records)})


def select_tau(
    grid: Sequence[float],
    records: Sequence[GatingRecord],
    run: _Run,
    kb: KnowledgeBase,
    train_data: PrefixData,
    val_data: PrefixData,
) -> tuple[float, list[dict]]:
    """Pick the tau whose shortened fine-tune maximises validation F1.

    Each candidate fine-tunes a copy of the phase-1 state for
    ``max(5, ef // 5)`` epochs with the same shuffle stream; candidates that
    keep the same rules share one run.  Ties go to the larger tau.
    """
    grid = sorted(set(float(t) for t in grid))
    if not grid:
        raise ConfigError("empty tau grid")
    if len(grid) == 1:
        return grid[0], [{"tau": grid[0], "kept": None, "f1": None}]
    cfg = run.config
    budget = max(5, cfg.ef // 5)
    tau_seed = _seed_streams(cfg.seed)["tau"]
    scores: dict[frozenset, float] = {}
    table = []
    for tau in grid:
        pruned_kb, _ = prune(kb, records, tau)
        kept = frozenset(a.id for a in pruned_kb.pruned)
        if kept not in scores:
            trial = _Run(run.model.clone(), cfg, ad.make_rng(tau_seed))
            trial.adam = copy.deepcopy(run.adam)
            finetune(trial, train_data, pruned_kb, budget)
            scores[kept] = compute_metrics(predict(trial.model, val_data), val_data.labels).f1
        table.append({"tau": tau, "kept": sorted(kept), "f1": scores[kept]})
    best = max(table, key=lambda row: (row["f1"], row["tau"]))
    return best["tau"], table


def train(
    config: TrainConfig,
    train_data: PrefixData,
    val_data: PrefixData | None,
    kb: KnowledgeBase,
    space: FeatureSpace,
) -> TrainResult:
    """Train one variant end to end."""
    if len(train_data) == 0:
        raise ConfigError("no training prefixes")
    for d in (train_data, val_data):
        if d is not None:
            d.add_atoms(kb.atoms())
    run = _new_run(config, space)
    result = TrainResult(config.variant, run.model, config, kb)
    total = config.total_epochs
    v = config.variant
    if v == "bce_baseline":
        run.epochs(train_data, bce_loss, total, "bce", kb.data)
    elif v == "ltn_data":
        run.epochs(train_data, ltn_loss(kb.data), total, "ltn_data", kb.all_axioms)
    elif v == "ltn_nop":
        run.epochs(train_data, ltn_loss(kb.all_axioms), total, "ltn_nop", kb.all_axioms)
    else:
        pretrain(run, train_data, kb)
        gate_data = val_data if val_data is not None and len(val_data) else train_data
        if gate_data is train_data:
            log.warning("no validation prefixes: gating scores computed on training data")
        records = compute_gating(kb, gate_data, run.model, config.lam, config.p, config.semantics)
        if config.tau == "auto":
            grid = list(config.tau_grid) if config.tau_grid else default_tau_grid(records)
            if kb.knowledge:
                tau, result.tau_search = select_tau(grid, records, run, kb, train_data, gate_data)
            else:
                tau = max(grid)
        else:
            tau = float(config.tau)
        pruned_kb, records = prune(kb, records, tau)
        result.kb, result.gating, result.tau = pruned_kb, records, tau
        log.info("tau=%.4f kept %d/%d rules: %s", tau, len(pruned_kb.pruned), len(kb.knowledge),
                 [a.id for a in pruned_kb.pruned])
        finetune(run, train_data, pruned_kb)
    result.history = run.history
    return result


def train_baseline(config: TrainConfig, train_data, kb: KnowledgeBase, space: FeatureSpace) -> TrainResult:
    if config.variant == "two_stage":
        raise ConfigError("train_baseline handles bce_baseline, ltn_data and ltn_nop")
    return train(config, train_data, None, kb, space)
