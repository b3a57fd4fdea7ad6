"""Command-line entry point: train, evaluate, experiment, synth, suggest.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
Settings resolve as command-line flag, then config file, then default.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .eventlog import LogError, LogSchema, SplitSpec, label_traces, load_log, make_split, write_log
from .evaluation.harness import canonical_variant, prepare, run_experiment
from .evaluation.metrics import compute_metrics
from .evaluation.synthetic import DEFAULT_RULES, SyntheticSpec, generate_synthetic_log
from .model import FIDELITY_CONFIG, EncoderConfig, load_checkpoint, save_checkpoint
from .reallogic import LogicError
from .rules import DATA_AXIOMS, KnowledgeBase, RuleCompileError, RuleParseError, build_kb, parse_rules, suggest_rules
from .training import VARIANTS, ConfigError, PrefixData, TrainConfig, predict, train

log = logging.getLogger("ltnppm")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

DEFAULTS = {
    "col_case": "case_id",
    "col_activity": "activity",
    "col_timestamp": "timestamp",
    "col_label": "label",
    "labeler": None,
    "rules": None,
    "variant": "two-stage",
    "alpha": 0.8,
    "beta": 0.2,
    "ep": 5,
    "ef": 50,
    "lam": 1.0,
    "tau": "auto",
    "p": 2.0,
    "lr": 1e-3,
    "batch_size": 32,
    "seed": 1,
    "split": "temporal",
    "train_fraction": 0.64,
    "validation_fraction": 0.16,
    "enrichment": 0.323,
    "min_prefix": 2,
    "max_prefix": None,
    "phase2_alpha": None,
    "phase2_beta": None,
    "semantics": "product",
    "backbone": "recurrent",
    "cell": "gru",
    "layers": 1,
    "hidden": 32,
    "embed_dim": 16,
    "fidelity": False,
    "variants": "bce,ltn-data,ltn-nop,two-stage",
    "seeds": "5",
    "workers": 1,
    "dataset": None,
}


class UsageError(Exception):
    """Invalid input; reported with exit code 1."""


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict[str, str]
    seed: int | None
    version: str = __version__
    started: str = ""
    finished: str = ""
    id: str = ""
    artifacts: list[str] = field(default_factory=list)

    def compute_id(self) -> str:
        config = {k: v for k, v in self.config.items() if k not in ("out", "command")}
        body = json.dumps({"command": self.command, "config": config, "inputs": self.inputs,
                           "version": self.version}, sort_keys=True, default=str)
        self.id = hashlib.sha256(body.encode()).hexdigest()[:16]
        return self.id

    def write(self, out: Path) -> None:
        (out / "manifest.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# --- configuration ------------------------------------------------------


def load_config(path: str | None, command: str) -> dict:
    """Flat keys at top level; a ``[command]`` table overrides them for that command."""
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    flat = {k.replace("-", "_"): v for k, v in raw.items() if not isinstance(v, dict)}
    flat.update({k.replace("-", "_"): v for k, v in raw.get(command, {}).items()})
    unknown = sorted(set(flat) - set(DEFAULTS) - {"log", "out", "traces", "planted_rules", "noise",
                                                   "min_support", "min_confidence", "checkpoint"})
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return flat


def resolve(args: argparse.Namespace, command: str) -> dict:
    """Merge flags over config over defaults."""
    cfg = dict(DEFAULTS)
    cfg.update(load_config(getattr(args, "config", None), command))
    for k, v in vars(args).items():
        if v is not None and k not in ("func", "config", "verbose"):
            cfg[k] = v
    return cfg


def encoder_config(cfg: dict) -> EncoderConfig:
    if cfg["fidelity"]:
        return FIDELITY_CONFIG
    return EncoderConfig(cfg["backbone"], cfg["cell"], int(cfg["layers"]), int(cfg["hidden"]), int(cfg["embed_dim"]))


def train_config(cfg: dict, variant: str | None = None) -> TrainConfig:
    tau = cfg["tau"]
    if tau != "auto":
        try:
            tau = float(tau)
        except ValueError:
            raise UsageError(f"--tau must be a number or 'auto', got {tau!r}") from None
    return TrainConfig(
        variant=canonical_variant(variant or cfg["variant"]),
        alpha=float(cfg["alpha"]),
        beta=float(cfg["beta"]),
        ep=int(cfg["ep"]),
        ef=int(cfg["ef"]),
        lam=float(cfg["lam"]),
        tau=tau,
        p=float(cfg["p"]),
        lr=float(cfg["lr"]),
        batch_size=int(cfg["batch_size"]),
        seed=int(cfg["seed"]),
        mode="compliance_aware" if split_mode(cfg) == "compliance_aware" else "temporal",
        phase2_alpha=cfg["phase2_alpha"],
        phase2_beta=cfg["phase2_beta"],
        semantics=cfg["semantics"],
        encoder=encoder_config(cfg),
    )


def split_mode(cfg: dict) -> str:
    s = cfg["split"].replace("-", "_")
    if s in ("compliance", "compliance_aware"):
        return "compliance_aware"
    if s == "temporal":
        return "temporal"
    raise UsageError(f"unknown split {cfg['split']!r}; use temporal or compliance")


def split_spec(cfg: dict) -> SplitSpec:
    mode = split_mode(cfg)
    return SplitSpec(
        mode=mode,
        train_fraction=float(cfg["train_fraction"]),
        validation_fraction=float(cfg["validation_fraction"]),
        compliant_enrichment_ratio=float(cfg["enrichment"]) if mode == "compliance_aware" else 0.0,
        min_prefix_len=int(cfg["min_prefix"]),
        max_prefix_len=None if cfg["max_prefix"] is None else int(cfg["max_prefix"]),
        seed=int(cfg["seed"]),
    )


def parse_seeds(text) -> list[int]:
    """``"5"`` means seeds 1..5; ``"3,7,11"`` lists them."""
    s = str(text).strip()
    if "," in s:
        return [int(x) for x in s.split(",") if x.strip()]
    n = int(s)
    if n < 1:
        raise UsageError("--seeds must be >= 1")
    return list(range(1, n + 1))


# --- shared loading -----------------------------------------------------


def load_traces(cfg: dict):
    if not cfg.get("log"):
        raise UsageError("--log is required")
    if not Path(cfg["log"]).exists():
        raise UsageError(f"log file not found: {cfg['log']}")
    schema = LogSchema(cfg["col_case"], cfg["col_activity"], cfg["col_timestamp"],
                       None if cfg["labeler"] else cfg["col_label"])
    traces = load_log(cfg["log"], schema)
    if cfg["labeler"]:
        traces, counts = label_traces(traces, cfg["labeler"])
        log.info("labels: %s", counts)
    missing = [t.case_id for t in traces if t.label is None]
    if missing:
        raise UsageError(f"{len(missing)} cases have no label (e.g. {missing[0]!r}); "
                         f"add a {cfg['col_label']!r} column or pass --labeler")
    return traces


def load_kb(cfg: dict, traces) -> KnowledgeBase:
    if not cfg.get("rules"):
        return KnowledgeBase(DATA_AXIOMS, (), (), ())
    path = Path(cfg["rules"])
    if not path.exists():
        raise UsageError(f"rules file not found: {path}")
    acts = {e.activity for t in traces for e in t.events}
    attrs = {k for t in traces for k in t.case_attributes} | {k for t in traces for e in t.events for k in e.attributes}
    return build_kb(parse_rules(path.read_text(encoding="utf-8"), acts, attrs))


def _out_dir(cfg: dict, default: str) -> Path:
    out = Path(cfg.get("out") or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str))


# --- commands -----------------------------------------------------------


def cmd_train(args) -> int:
    cfg = resolve(args, "train")
    variant = canonical_variant(cfg["variant"])
    if variant == "two_stage" and not cfg.get("rules"):
        raise UsageError("two-stage training needs --rules; without rules use --variant ltn-data")
    tc = train_config(cfg)
    traces = load_traces(cfg)
    kb = load_kb(cfg, traces)
    spec = split_spec(cfg)
    out = _out_dir(cfg, "run")
    inputs = {"log": file_hash(cfg["log"])}
    if cfg.get("rules"):
        inputs["rules"] = file_hash(cfg["rules"])
    manifest = RunManifest("train", {**cfg, "resolved": tc.to_dict(), "split_spec": asdict(spec)}, inputs, tc.seed,
                           started=_now())
    mid = manifest.compute_id()

    prepared = prepare(traces, kb, spec)
    result = train(tc, prepared.train, prepared.validation, kb, prepared.space)
    metrics = {
        part: compute_metrics(predict(result.model, d), d.labels).to_dict()
        for part, d in (("validation", prepared.validation), ("test", prepared.test))
        if len(d)
    }
    save_checkpoint(result.model, out / "checkpoint.json", manifest_id=mid, variant=tc.variant,
                    kept_rules=[a.id for a in result.kb.pruned])
    result.write_satisfaction_csv(out / "satisfaction.csv")
    prepared.split.write_manifest(out / "split.json")
    _dump(out / "metrics.json", {"manifest_id": mid, "variant": tc.variant, "seed": tc.seed, **metrics})
    manifest.artifacts = ["checkpoint.json", "satisfaction.csv", "split.json", "metrics.json"]
    if tc.variant == "two_stage":
        _dump(out / "pruning_report.json", {"manifest_id": mid, **result.pruning_report()})
        manifest.artifacts.append("pruning_report.json")
    manifest.finished = _now()
    manifest.write(out)
    if "test" in metrics:
        print(f"test accuracy {metrics['test']['accuracy']:.4f}  f1 {metrics['test']['f1']:.4f}")
    print(f"artifacts written to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = resolve(args, "evaluate")
    if not cfg.get("checkpoint") or not Path(cfg["checkpoint"]).exists():
        raise UsageError("--checkpoint must name an existing checkpoint file")
    model, extra = load_checkpoint(cfg["checkpoint"])
    traces = load_traces(cfg)
    kb = load_kb(cfg, traces)
    spec = split_spec(cfg)
    split = make_split(traces, spec, kb)
    part = cfg.get("part") or "test"
    data = PrefixData(getattr(split, part), model.space, [], spec.min_prefix_len, spec.max_prefix_len)
    if not len(data):
        raise UsageError(f"no prefixes in the {part} split")
    m = compute_metrics(predict(model, data), data.labels)
    report = {"checkpoint": str(cfg["checkpoint"]), "manifest_id": extra.get("manifest_id"),
              "split": spec.mode, "part": part, "metrics": m.to_dict()}
    text = json.dumps(report, indent=2, sort_keys=True)
    if cfg.get("out"):
        Path(cfg["out"]).write_text(text)
    print(text)
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = resolve(args, "experiment")
    variants = [canonical_variant(v) for v in str(cfg["variants"]).split(",") if v.strip()]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variants {bad}; choose from bce, ltn-data, ltn-nop, two-stage")
    seeds = parse_seeds(cfg["seeds"])
    base = train_config(cfg, variants[0])
    traces = load_traces(cfg)
    kb = load_kb(cfg, traces)
    if not kb.knowledge and any(v in ("two_stage", "ltn_nop") for v in variants):
        log.warning("no knowledge rules: ltn_nop and two_stage reduce to data axioms")
    if "two_stage" in variants and not kb.knowledge:
        raise UsageError("two-stage needs --rules; drop it from --variants or supply a rule file")
    spec = split_spec(cfg)
    out = _out_dir(cfg, "experiment")
    inputs = {"log": file_hash(cfg["log"])}
    if cfg.get("rules"):
        inputs["rules"] = file_hash(cfg["rules"])
    manifest = RunManifest("experiment", {**cfg, "resolved": base.to_dict(), "split_spec": asdict(spec),
                                          "seed_list": seeds}, inputs, None, started=_now())
    mid = manifest.compute_id()
    dataset = cfg["dataset"] or Path(cfg["log"]).stem
    report = run_experiment(traces, kb, variants, seeds, spec, base, dataset, int(cfg["workers"]))
    report.config["manifest_id"] = mid
    report.write_json(out / "report.json")
    report.write_table(out / "metrics.csv")
    report.write_per_run(out / "runs.csv")
    manifest.artifacts = ["report.json", "metrics.csv", "runs.csv"]
    manifest.finished = _now()
    manifest.write(out)
    print((out / "metrics.csv").read_text(), end="")
    failed = sum(1 for r in report.runs if r.error)
    if failed:
        log.error("%d of %d runs failed; see report.json", failed, len(report.runs))
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = resolve(args, "synth")
    n_rules = int(cfg.get("planted_rules") or len(DEFAULT_RULES))
    if not 1 <= n_rules <= len(DEFAULT_RULES):
        raise UsageError(f"--planted-rules must be between 1 and {len(DEFAULT_RULES)}")
    spec = SyntheticSpec(n_traces=int(cfg.get("traces") or 500), rules=DEFAULT_RULES[:n_rules],
                         noise=float(cfg.get("noise") or 0.0))
    syn = generate_synthetic_log(spec, int(cfg["seed"]))
    out = _out_dir(cfg, "synth")
    write_log(syn.traces, out / "log.csv")
    (out / "rules.txt").write_text(syn.rule_text())
    (out / "adversarial_rules.txt").write_text(syn.rule_text(inverted={r.kind for r in syn.rules}))
    pos = sum(t.label for t in syn.traces)
    print(f"{len(syn.traces)} traces ({pos} positive) written to {out / 'log.csv'}")
    print(f"ground-truth rules in {out / 'rules.txt'}")
    return EXIT_OK


def cmd_suggest(args) -> int:
    cfg = resolve(args, "suggest")
    if not cfg.get("log") or not Path(cfg["log"]).exists():
        raise UsageError("--log must name an existing CSV file")
    schema = LogSchema(cfg["col_case"], cfg["col_activity"], cfg["col_timestamp"], None)
    traces = load_log(cfg["log"], schema)
    sugg = suggest_rules(traces, int(cfg.get("min_support") or 10), float(cfg.get("min_confidence") or 0.95))
    lines = ["# heuristic template frequencies; review before use"]
    lines += [s.to_dsl(f"s{i + 1}") for i, s in enumerate(sugg)]
    text = "\n".join(lines) + "\n"
    if cfg.get("out"):
        Path(cfg["out"]).write_text(text)
    print(text, end="")
    return EXIT_OK


# --- parser -------------------------------------------------------------


def _common(p: argparse.ArgumentParser, log_required: bool = True) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--log", help="event log CSV")
    p.add_argument("--col-case", dest="col_case")
    p.add_argument("--col-activity", dest="col_activity")
    p.add_argument("--col-timestamp", dest="col_timestamp")
    p.add_argument("--col-label", dest="col_label", help="label column (default: label)")
    p.add_argument("--labeler", help='derive labels, e.g. "contains Surg" or "attribute age > 60"')
    p.add_argument("--rules", help="rule file in the DSL")
    p.add_argument("--out", help="output directory or file")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--ep", type=int, help="phase-1 epochs")
    p.add_argument("--ef", type=int, help="phase-2 epochs")
    p.add_argument("--lam", "--lambda", dest="lam", type=float)
    p.add_argument("--tau", help="pruning threshold or 'auto'")
    p.add_argument("--p", type=float, help="aggregator exponent")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--phase2-alpha", dest="phase2_alpha", type=float)
    p.add_argument("--phase2-beta", dest="phase2_beta", type=float)
    p.add_argument("--semantics", choices=["product", "lukasiewicz", "godel"])
    p.add_argument("--backbone", choices=["recurrent", "pooled_mlp"])
    p.add_argument("--cell", choices=["gru", "lstm"])
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--fidelity", action="store_true", default=None, help="2-layer 128-unit LSTM, embed 32")


def _splitting(p: argparse.ArgumentParser) -> None:
    p.add_argument("--split", help="temporal or compliance")
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    p.add_argument("--validation-fraction", dest="validation_fraction", type=float)
    p.add_argument("--enrichment", type=float, help="target compliant fraction of the test set")
    p.add_argument("--min-prefix", dest="min_prefix", type=int)
    p.add_argument("--max-prefix", dest="max_prefix", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ltnppm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one variant")
    _common(p)
    _training(p)
    _splitting(p)
    p.add_argument("--variant", help="bce, ltn-data, ltn-nop or two-stage")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a split")
    _common(p)
    _splitting(p)
    p.add_argument("--checkpoint")
    p.add_argument("--part", choices=["train", "validation", "test"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="variants x seeds matrix")
    _common(p)
    _training(p)
    _splitting(p)
    p.add_argument("--variants", help="comma list, e.g. lstm-bce,ltn-data,ltn-nop,two-stage")
    p.add_argument("--seeds", help="count (1..N) or comma list")
    p.add_argument("--workers", type=int)
    p.add_argument("--dataset", help="dataset name in the table")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("synth", help="generate a synthetic log with planted rules")
    p.add_argument("--config")
    p.add_argument("--traces", type=int)
    p.add_argument("--planted-rules", dest="planted_rules", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("suggest", help="heuristic Declare rule candidates from a log")
    p.add_argument("--config")
    p.add_argument("--log")
    p.add_argument("--col-case", dest="col_case")
    p.add_argument("--col-activity", dest="col_activity")
    p.add_argument("--col-timestamp", dest="col_timestamp")
    p.add_argument("--min-support", dest="min_support", type=int)
    p.add_argument("--min-confidence", dest="min_confidence", type=float)
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=cmd_suggest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, LogError, RuleParseError, RuleCompileError, LogicError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
