"""Multi-variant, multi-seed experiments and their reports."""

from __future__ import annotations

import csv
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..eventlog import Split, SplitSpec, Trace, make_split
from ..model import FeatureSpace
from ..rules import KnowledgeBase
from ..training import PrefixData, TrainConfig, predict, train
from .metrics import compute_metrics

log = logging.getLogger(__name__)

# CLI spellings accepted for each variant
VARIANT_ALIASES = {
    "bce": "bce_baseline",
    "lstm-bce": "bce_baseline",
    "gru-bce": "bce_baseline",
    "bce-baseline": "bce_baseline",
    "ltn-data": "ltn_data",
    "ltn-nop": "ltn_nop",
    "two-stage": "two_stage",
}


def canonical_variant(name: str) -> str:
    n = name.strip().lower()
    return VARIANT_ALIASES.get(n, n.replace("-", "_"))


@dataclass
class RunResult:
    variant: str
    seed: int
    metrics: dict | None = None
    error: str | None = None
    pruning: dict | None = None
    epochs: int = 0


@dataclass
class ExperimentReport:
    dataset: str
    variants: list[str]
    seeds: list[int]
    config: dict
    split: dict
    runs: list[RunResult] = field(default_factory=list)

    def summary(self) -> dict[str, dict]:
        """Mean and population std of accuracy and F1 per variant over successful seeds."""
        out = {}
        for v in self.variants:
            ok = [r.metrics for r in self.runs if r.variant == v and r.metrics is not None]
            row = {"n": len(ok), "failed": sum(1 for r in self.runs if r.variant == v and r.error)}
            for key in ("accuracy", "f1"):
                vals = np.array([m[key] for m in ok], dtype=float)
                row[f"{key}_mean"] = float(vals.mean()) if vals.size else float("nan")
                row[f"{key}_std"] = float(vals.std()) if vals.size else float("nan")
            out[v] = row
        return out

    def mean_f1(self, variant: str) -> float:
        return self.summary()[variant]["f1_mean"]

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "variants": self.variants,
            "seeds": self.seeds,
            "config": self.config,
            "split": self.split,
            "summary": self.summary(),
            "runs": [r.__dict__ for r in self.runs],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str))

    def write_table(self, path) -> None:
        """One row per variant: dataset, accuracy and F1 as mean and std in percent."""
        summary = self.summary()
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "dataset", "accuracy_mean", "accuracy_std", "f1_mean", "f1_std", "n_runs"])
            for v in self.variants:
                s = summary[v]
                w.writerow([
                    v, self.dataset,
                    f"{100 * s['accuracy_mean']:.2f}", f"{100 * s['accuracy_std']:.2f}",
                    f"{100 * s['f1_mean']:.2f}", f"{100 * s['f1_std']:.2f}",
                    s["n"],
                ])

    def write_per_run(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "seed", "accuracy", "f1", "error"])
            for r in sorted(self.runs, key=lambda r: (self.variants.index(r.variant), r.seed)):
                m = r.metrics or {}
                w.writerow([r.variant, r.seed, repr(m.get("accuracy", "")), repr(m.get("f1", "")), r.error or ""])


@dataclass
class PreparedData:
    split: Split
    space: FeatureSpace
    train: PrefixData
    validation: PrefixData
    test: PrefixData


def prepare(traces: Sequence[Trace], kb: KnowledgeBase, split_spec: SplitSpec) -> PreparedData:
    """Split, fit the encoder on training traces, and tabulate prefixes per split."""
    split = make_split(traces, split_spec, kb)
    space = FeatureSpace.fit(split.train)
    atoms = kb.atoms()

    def data(ts):
        return PrefixData(ts, space, atoms, split_spec.min_prefix_len, split_spec.max_prefix_len)

    return PreparedData(split, space, data(split.train), data(split.validation), data(split.test))


def run_one(prepared: PreparedData, kb: KnowledgeBase, config: TrainConfig) -> RunResult:
    """Train one (variant, seed) and score it on the test prefixes; failures are captured."""
    try:
        result = train(config, prepared.train, prepared.validation, kb, prepared.space)
        m = compute_metrics(predict(result.model, prepared.test), prepared.test.labels)
        pruning = result.pruning_report() if config.variant == "two_stage" else None
        return RunResult(config.variant, config.seed, m.to_dict(), None, pruning, result.epochs)
    except Exception as exc:  # recorded, the experiment continues
        log.error("run %s seed %d failed: %s", config.variant, config.seed, exc)
        return RunResult(config.variant, config.seed, None, "".join(traceback.format_exception_only(type(exc), exc)).strip())


def _run_job(args):
    return run_one(*args)


def run_experiment(
    traces: Sequence[Trace],
    kb: KnowledgeBase,
    variants: Sequence[str],
    seeds: Sequence[int],
    split_spec: SplitSpec,
    base_config: TrainConfig | None = None,
    dataset: str = "log",
    workers: int = 1,
) -> ExperimentReport:
    """Every variant on every seed, sharing one split so test sets are identical across variants."""
    if not variants:
        raise ValueError("no variants requested")
    if not seeds:
        raise ValueError("no seeds requested")
    variants = [canonical_variant(v) for v in variants]
    base = base_config or TrainConfig()
    if base.mode == "temporal" and split_spec.mode == "compliance_aware":
        base = replace(base, mode="compliance_aware")
    prepared = prepare(traces, kb, split_spec)
    jobs = [(prepared, kb, replace(base, variant=v, seed=s)) for v in variants for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_job, jobs))
    else:
        runs = [_run_job(j) for j in jobs]
    return ExperimentReport(
        dataset=dataset,
        variants=list(variants),
        seeds=list(seeds),
        config=base.to_dict(),
        split=prepared.split.manifest(),
        runs=runs,
    )
