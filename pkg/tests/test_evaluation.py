import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ltnppm.eventlog import SplitSpec
from ltnppm.evaluation import compute_metrics
from ltnppm.evaluation import harness
from ltnppm.evaluation.harness import canonical_variant, run_experiment
from ltnppm.evaluation.synthetic import PlantedRule, SyntheticSpec, generate_synthetic_log
from ltnppm.model import EncoderConfig
from ltnppm.rules import build_kb, is_compliant, parse_rules
from ltnppm.training import TrainConfig
from oracles import confusion


def test_hand_counted_metrics():
    m = compute_metrics([0.9, 0.2, 0.6, 0.4], [1, 0, 0, 1])
    assert (m.tp, m.fp, m.fn, m.tn) == (1, 1, 1, 1)
    assert m.accuracy == 0.5 and m.f1 == 0.5


def test_degenerate_predictors():
    perfect = compute_metrics([1.0, 0.0, 0.7], [1, 0, 1])
    assert perfect.accuracy == 1.0 and perfect.f1 == 1.0
    silent = compute_metrics([0.1, 0.1, 0.1, 0.1], [1, 0, 1, 0])
    assert silent.accuracy == 0.5 and silent.f1 == 0.0
    assert compute_metrics([0.2], [0]).f1 == 0.0


def test_threshold_is_inclusive():
    assert compute_metrics([0.5], [1]).tp == 1


def test_metric_errors():
    with pytest.raises(ValueError):
        compute_metrics([], [])
    with pytest.raises(ValueError):
        compute_metrics([0.5, 0.2], [1])
    with pytest.raises(ValueError):
        compute_metrics([0.5], [2])


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=30))
def test_metrics_match_brute_force_counts(rows):
    preds, labels = zip(*rows)
    c = confusion(preds, labels)
    tp, fp, fn, tn = c["tp"], c["fp"], c["fn"], c["tn"]
    m = compute_metrics(preds, labels)
    assert (m.tp, m.fp, m.fn, m.tn) == (tp, fp, fn, tn)
    assert m.accuracy == pytest.approx((tp + tn) / len(rows), abs=1e-15)
    expected_f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0
    assert m.f1 == pytest.approx(expected_f1, abs=1e-15)
    assert m.support_positive + m.support_negative == len(rows)
    macro = compute_metrics(preds, labels, average="macro").f1
    assert 0.0 <= macro <= 1.0


def test_synthetic_size_and_determinism():
    spec = SyntheticSpec(n_traces=200)
    a, b = generate_synthetic_log(spec, 3), generate_synthetic_log(spec, 3)
    assert len(a.traces) == 200
    assert [t.events for t in a.traces] == [t.events for t in b.traces]
    assert [t.label for t in a.traces] != [t.label for t in generate_synthetic_log(spec, 4).traces]


def test_noise_free_label_follows_the_planted_rule():
    log = generate_synthetic_log(SyntheticSpec(n_traces=300, rules=(PlantedRule("age", 0.4),)), 0)
    for t in log.traces:
        assert t.label == int(t.case_attributes["age"] > 60)


def test_planted_firing_rate_concentrates():
    log = generate_synthetic_log(SyntheticSpec(n_traces=1000, rules=(PlantedRule("delay", 0.3),)), 1)
    rate = np.mean([f["delay"] for f in log.fired.values()])
    assert abs(rate - 0.3) <= 0.05


def test_planted_rule_text_is_checkable():
    log = generate_synthetic_log(SyntheticSpec(n_traces=200), 2)
    kb = build_kb(parse_rules(log.rule_text()))
    positives = [t for t in log.traces if t.label == 1]
    assert positives and all(is_compliant(t, kb) for t in positives)
    adv = log.rule_text(inverted={"age"})
    assert "adv_age: if payload(age, case) > 60 on all then not P" in adv


@pytest.mark.parametrize("kw", [dict(noise=1.5), dict(n_traces=0), dict(rules=(PlantedRule("age", 0.1),) * 2)])
def test_inconsistent_synthetic_spec(kw):
    with pytest.raises(ValueError):
        SyntheticSpec(**kw)


def test_planted_probability_outside_unit_interval():
    with pytest.raises(ValueError):
        PlantedRule("age", 1.2)


def test_variant_aliases():
    assert canonical_variant("lstm-bce") == "bce_baseline"
    assert canonical_variant("two-stage") == "two_stage"
    assert canonical_variant("ltn_data") == "ltn_data"


FAST = TrainConfig(ep=1, ef=2, lr=0.01, encoder=EncoderConfig(hidden=6, embed_dim=4))


@pytest.fixture(scope="module")
def small_log():
    log = generate_synthetic_log(SyntheticSpec(n_traces=40), 0)
    return log.traces, build_kb(parse_rules(log.rule_text()))


def test_single_seed_has_zero_std(small_log):
    traces, kb = small_log
    report = run_experiment(traces, kb, ["ltn-data"], [1], SplitSpec(), FAST)
    s = report.summary()["ltn_data"]
    assert s["n"] == 1 and s["f1_std"] == 0.0 and s["accuracy_std"] == 0.0


def test_five_seeds_one_variant(small_log):
    traces, kb = small_log
    report = run_experiment(traces, kb, ["ltn-data"], [1, 2, 3, 4, 5], SplitSpec(), FAST)
    f1s = [r.metrics["f1"] for r in report.runs]
    assert len(f1s) == 5
    assert report.summary()["ltn_data"]["f1_std"] == pytest.approx(float(np.std(f1s)), abs=1e-15)


def test_variant_order_does_not_change_runs(small_log):
    traces, kb = small_log
    a = run_experiment(traces, kb, ["bce", "two-stage"], [1, 2], SplitSpec(), FAST)
    b = run_experiment(traces, kb, ["two-stage", "bce"], [1, 2], SplitSpec(), FAST)
    key = lambda r: (r.variant, r.seed)
    assert {key(r): r.metrics for r in a.runs} == {key(r): r.metrics for r in b.runs}
    assert a.split == b.split


def test_failed_run_is_recorded_and_others_continue(small_log, monkeypatch, tmp_path):
    traces, kb = small_log
    real = harness.train

    def flaky(config, *args):
        if config.seed == 2:
            raise RuntimeError("boom")
        return real(config, *args)

    monkeypatch.setattr(harness, "train", flaky)
    report = run_experiment(traces, kb, ["ltn-data"], [1, 2, 3], SplitSpec(), FAST)
    errors = {r.seed: r.error for r in report.runs}
    assert "boom" in errors[2] and errors[1] is None and errors[3] is None
    assert report.summary()["ltn_data"]["n"] == 2
    report.write_table(tmp_path / "t.csv")
    (row,) = list(csv.DictReader((tmp_path / "t.csv").open()))
    assert row["n_runs"] == "2" and row["variant"] == "ltn_data"


def test_compliance_split_switches_phase_two_mode(small_log):
    traces, kb = small_log
    spec = SplitSpec(mode="compliance_aware", compliant_enrichment_ratio=0.3)
    report = run_experiment(traces, kb, ["two-stage"], [1], spec, FAST)
    assert report.config["mode"] == "compliance_aware"
    assert report.split["mode"] == "compliance_aware"
