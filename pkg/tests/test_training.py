import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_trace
from ltnppm.autodiff import Tensor
from ltnppm.evaluation import compute_metrics
from ltnppm.model import EncoderConfig, FeatureSpace
from ltnppm.reallogic import Axiom, Forall, GroundingContext, NoEvaluableAxioms, Predicate, sat_agg
from ltnppm.rules import DATA_AXIOMS, build_kb, parse_rules
from ltnppm.training import (
    ConfigError,
    GatingRecord,
    PrefixData,
    TrainConfig,
    TrainingAborted,
    _new_run,
    compute_gating,
    default_tau_grid,
    ltn_loss,
    predict,
    prune,
    select_tau,
    train,
    weighted_loss,
)

TINY = EncoderConfig(hidden=6, embed_dim=4)
GOOD = "good: if occ_count(X) >= 1 on all then P\n"
HARMFUL = "bad: if occ_count(X) >= 1 on all then not P\n"


def marker_traces(n, offset=0):
    """Positives contain X, negatives contain Y; otherwise identical."""
    return [
        make_trace(f"c{i + offset:03d}", [("A", 0), ("X" if i % 2 == 0 else "Y", 1), ("B", 2)], int(i % 2 == 0))
        for i in range(n)
    ]


def prepared(rules="", n_train=24, n_val=12):
    kb = build_kb(parse_rules(rules))
    tr, va = marker_traces(n_train), marker_traces(n_val, offset=500)
    space = FeatureSpace.fit(tr)
    return kb, space, PrefixData(tr, space, kb.atoms(), 2, None), PrefixData(va, space, kb.atoms(), 2, None)


def config(**kw):
    base = dict(ep=2, ef=3, lr=0.01, batch_size=8, encoder=TINY, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def constant_ctx(labels, preds):
    return GroundingContext(np.array(labels), {}, Tensor(np.array(preds, dtype=float)))


def test_weighted_loss_examples():
    data, kn = list(DATA_AXIOMS), [DATA_AXIOMS[0]]
    perfect = constant_ctx([1, 0], [1.0, 0.0])
    assert weighted_loss(perfect, data, kn, 0.8, 0.2).item() == pytest.approx(0.0, abs=1e-15)
    # data axioms fully satisfied; a knowledge axiom demanding P everywhere is fully violated
    contrary = Axiom("k", Forall("negative", Predicate()), "knowledge", "data")
    ctx = constant_ctx([1, 0], [1.0, 0.0])
    assert sat_agg([contrary], ctx).item() == 0.0
    assert weighted_loss(ctx, data, [contrary], 0.8, 0.2).item() == pytest.approx(0.2, abs=1e-12)
    ctx = constant_ctx([1, 0], [0.7, 0.4])
    assert weighted_loss(ctx, data, [contrary], 1.0, 0.0).item() == ltn_loss(data)(ctx).item()
    assert weighted_loss(ctx, data, [], 0.8, 0.2).item() == ltn_loss(data)(ctx).item()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.floats(1e-6, 1 - 1e-6)), min_size=2, max_size=10),
       st.floats(0, 1))
def test_losses_stay_in_unit_interval(rows, alpha):
    labels, preds = zip(*rows)
    kb = build_kb(parse_rules("r: if occ_count(X) >= 1 on all then P"))
    atoms = {a: np.random.default_rng(len(rows)).random(len(rows)) for a in kb.atoms()}
    ctx = GroundingContext(np.array(labels), atoms, Tensor(np.array(preds)))
    try:
        value = weighted_loss(ctx, kb.data, kb.knowledge, alpha, 1 - alpha).item()
    except NoEvaluableAxioms:
        return
    assert -1e-12 <= value <= 1 + 1e-12


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(alpha=0.7, beta=0.2)
    with pytest.raises(ConfigError):
        TrainConfig(ep=0)
    with pytest.raises(ConfigError):
        TrainConfig(variant="magic")
    assert TrainConfig(variant="ltn_data", ep=0, ef=3).total_epochs == 3


def test_epoch_counts_follow_budget():
    kb, space, tr, va = prepared(GOOD)
    res = train(config(ep=5, ef=50, tau=0.0, batch_size=64), tr, va, kb, space)
    phases = [r.phase for r in res.history]
    assert phases.count("pretrain") == 5 and phases.count("finetune") == 50
    nop = train(config(variant="ltn_nop", ep=5, ef=50, batch_size=64), tr, va, kb, space)
    assert nop.epochs == res.epochs == 55
    assert all(0 <= r.loss <= 1 for r in res.history)


def test_phase_one_loss_strictly_decreases_on_separable_data():
    kb, space, tr, va = prepared(GOOD)
    res = train(config(ep=5, ef=1, tau=0.0), tr, va, kb, space)
    losses = [r.loss for r in res.history if r.phase == "pretrain"]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_gating_examples():
    assert 0.9 * math.exp(-3 * 0.0) == 0.9
    assert 0.8 * math.exp(-2 * 0.5) == pytest.approx(0.29430, abs=1e-5)
    kb, space, tr, va = prepared(GOOD + HARMFUL + "never: if occ_count(Z) >= 1 on all then P\n")
    res = train(config(tau=0.0), tr, va, kb, space)
    records = compute_gating(kb, va, res.model, lam=2.0)
    by_id = {r.rule_id: r for r in records}
    never = by_id["never"]
    # Z never occurs: the body is vacuously true on every sample, so zero variance
    assert never.var == 0.0 and never.g == never.mean == 1.0
    for r in records:
        assert r.g == pytest.approx(r.mean * math.exp(-2.0 * r.var), abs=1e-12)
        assert r.mean == pytest.approx(float(np.mean(r.samples)), abs=1e-12)
        assert r.var == pytest.approx(float(np.var(r.samples)), abs=1e-12)


def test_constant_false_rule_scores_zero():
    kb, space, tr, va = prepared("f: if occ_count(A) >= 1 on positive then not P\n")
    res = train(config(variant="ltn_data"), tr, va, kb, space)
    va.labels[:] = 1
    preds = predict(res.model, va)
    record = compute_gating(kb, va, res.model, lam=1.0)[0]
    assert record.mean == pytest.approx(float(np.mean(1 - preds)), abs=1e-12)
    # a rule over an empty domain is vacuous and scores zero
    va.labels[:] = 0
    record = compute_gating(kb, va, res.model, lam=1.0)[0]
    assert record.vacuous and record.g == 0.0


def test_prune_examples():
    kb = build_kb(parse_rules("a: existence(A)\nb: existence(B)\nc: existence(C)"))
    records = [GatingRecord("a", 0.9, 0.0, 0.9), GatingRecord("b", 0.5, 0.3, 0.29), GatingRecord("c", 0.0, 0.1, 0.0)]
    assert [a.id for a in prune(kb, records, 0.5)[0].pruned] == ["a"]
    assert len(prune(kb, records, 0.0)[0].pruned) == 3
    assert len(prune(kb, records, 1.0 + 1e-9)[0].pruned) == 0
    assert [a.id for a in prune(kb, records, 0.29)[0].pruned] == ["a", "b"]  # boundary kept


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=6), st.floats(0, 1), st.floats(0, 1))
def test_pruning_is_monotone_in_tau(gs, t1, t2):
    lo, hi = sorted((t1, t2))
    kb = build_kb(parse_rules("\n".join(f"r{i}: existence(A{i})" for i in range(len(gs)))))
    records = [GatingRecord(f"r{i}", g, 0.0, g) for i, g in enumerate(gs)]
    kept_hi = {a.id for a in prune(kb, records, hi)[0].pruned}
    kept_lo = {a.id for a in prune(kb, records, lo)[0].pruned}
    assert kept_hi <= kept_lo


def test_default_tau_grid_includes_zero_and_scores():
    records = [GatingRecord("a", 0.9, 0.0, 0.9), GatingRecord("b", 0.5, 0.3, 0.3)]
    assert default_tau_grid(records) == [0.0, 0.3, 0.9]


def test_compliance_mode_loss_differs_from_temporal():
    ctx = constant_ctx([1, 0, 1], [0.8, 0.3, 0.6])
    k = Axiom("k", Forall("all", Predicate()), "knowledge", "data")
    data = list(DATA_AXIOMS)
    sd, sk = sat_agg(data, ctx).item(), sat_agg([k], ctx).item()
    assert sd != sk
    weighted = weighted_loss(ctx, data, [k], 0.8, 0.2).item()
    joint = ltn_loss(data + [k])(ctx).item()
    assert weighted == pytest.approx(1 - (0.8 * sd + 0.2 * sk), abs=1e-12)
    assert weighted != pytest.approx(joint, abs=1e-6)


def test_compliance_mode_trains_differently():
    kb, space, tr, va = prepared(GOOD)
    a = train(config(tau=0.0), tr, va, kb, space)
    b = train(config(tau=0.0, mode="compliance_aware"), tr, va, kb, space)
    assert a.history[-1].loss != b.history[-1].loss


def test_reduction_chain_reproduces_ltn_data_exactly():
    kb, space, tr, va = prepared(GOOD)
    two = train(config(alpha=1.0, beta=0.0, tau=1.5), tr, va, kb, space)
    data_only = train(config(variant="ltn_data"), tr, va, kb, space)
    assert two.kb.pruned == ()
    for k, v in two.model.params.items():
        assert np.array_equal(v.data, data_only.model.params[k].data), k


def test_nop_without_rules_equals_ltn_data():
    kb, space, tr, va = prepared("")
    a = train(config(variant="ltn_nop"), tr, va, kb, space)
    b = train(config(variant="ltn_data"), tr, va, kb, space)
    assert all(np.array_equal(a.model.params[k].data, b.model.params[k].data) for k in a.model.params)


def test_same_seed_same_result_and_seeds_differ():
    kb, space, tr, va = prepared(GOOD)
    a, b = (train(config(tau=0.0), tr, va, kb, space) for _ in range(2))
    c = train(config(tau=0.0, seed=2), tr, va, kb, space)
    assert all(np.array_equal(a.model.params[k].data, b.model.params[k].data) for k in a.model.params)
    assert any(not np.array_equal(a.model.params[k].data, c.model.params[k].data) for k in a.model.params)


def test_select_tau_single_candidate():
    kb, space, tr, va = prepared(GOOD)
    assert select_tau([0.4], [], None, kb, tr, va)[0] == 0.4


def test_select_tau_avoids_harmful_rule():
    # pushes negatives towards P, so keeping it costs validation F1
    kb, space, tr, va = prepared("bad: if occ_count(Y) >= 1 on negative then P\n")
    cfg = config(ep=3, ef=25, tau_grid=(0.0, 0.5, 0.9), lr=0.02)
    res = train(cfg, tr, va, kb, space)
    table = {row["tau"]: row["f1"] for row in res.tau_search}
    assert res.tau >= 0.5
    assert table[0.0] < table[0.5]
    assert res.kb.pruned == () and res.gating[0].g < 0.5


def test_select_tau_ties_pick_largest():
    kb, space, tr, va = prepared(GOOD)
    records = [GatingRecord("good", 0.9, 0.0, 0.9)]
    cfg = config(ef=5)
    run = _new_run(cfg, space)
    # every candidate keeps the same rule set, so all scores tie
    tau, table = select_tau([0.1, 0.2, 0.3], records, run, kb, tr, va)
    assert tau == 0.3 and len({row["f1"] for row in table}) == 1


def test_bce_fits_separable_two_feature_set():
    rng = np.random.default_rng(0)
    xs = rng.uniform(-1, 1, size=(200, 2))
    xs = xs[np.abs(xs.sum(axis=1)) > 0.1][:120]
    traces = [make_trace(f"t{i:03d}", [("E", 0)], int(x1 + x2 > 0), {"x1": float(x1), "x2": float(x2)})
              for i, (x1, x2) in enumerate(xs)]
    kb = build_kb([])
    space = FeatureSpace.fit(traces)
    data = PrefixData(traces, space, kb.atoms(), 1, None)
    cfg = TrainConfig(variant="bce_baseline", ep=0, ef=150, lr=0.02, batch_size=32,
                      encoder=EncoderConfig(backbone="pooled_mlp", hidden=8, embed_dim=2))
    res = train(cfg, data, None, kb, space)
    assert compute_metrics(predict(res.model, data), data.labels).accuracy >= 0.99


def test_nan_loss_aborts_with_last_good_parameters():
    kb, space, tr, va = prepared("")
    run = _new_run(config(variant="ltn_data"), space)
    before = run.model.snapshot()
    with pytest.raises(TrainingAborted) as exc:
        run.epochs(tr, lambda ctx: ctx.predicate().mean() * float("nan"), 1, "ltn_data")
    assert all(np.array_equal(before[k], exc.value.last_good[k]) for k in before)


def test_reports_are_written(tmp_path):
    kb, space, tr, va = prepared(GOOD)
    res = train(config(tau=0.0), tr, va, kb, space)
    res.write_satisfaction_csv(tmp_path / "sat.csv")
    res.write_pruning_report(tmp_path / "prune.json")
    rows = list(csv.DictReader((tmp_path / "sat.csv").open()))
    assert set(rows[0]) == {"epoch", "phase", "axiom_id", "mean_sat"}
    assert {r["axiom_id"] for r in rows} == {"data_pos", "data_neg", "good"}
    report = json.loads((tmp_path / "prune.json").read_text())
    assert report["tau"] == 0.0 and report["kept"] == ["good"]
    assert set(report["rules"][0]) >= {"rule_id", "mean", "var", "g", "kept"}
