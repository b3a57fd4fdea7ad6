import json

import pytest

from ltnppm.cli import main, parse_seeds

SMALL = ["--ep", "1", "--ef", "2", "--hidden", "6", "--embed-dim", "4", "--lr", "0.01"]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--traces", "60", "--planted-rules", "3", "--noise", "0.1", "--seed", "7",
                 "--out", str(out)]) == 0
    return out


def test_synth_writes_log_and_rules(synth_dir):
    assert len((synth_dir / "rules.txt").read_text().splitlines()) == 3
    assert "not P" in (synth_dir / "adversarial_rules.txt").read_text()
    assert (synth_dir / "log.csv").read_text().startswith("case_id,")


def test_two_stage_without_rules_exits_one(synth_dir, tmp_path, capsys):
    code = main(["train", "--log", str(synth_dir / "log.csv"), "--variant", "two-stage", "--out", str(tmp_path)])
    assert code == 1
    assert "ltn-data" in capsys.readouterr().err


def test_weights_not_summing_to_one_exit_one(synth_dir, tmp_path, capsys):
    code = main(["train", "--log", str(synth_dir / "log.csv"), "--rules", str(synth_dir / "rules.txt"),
                 "--alpha", "0.7", "--beta", "0.2", "--out", str(tmp_path)])
    assert code == 1
    assert "alpha + beta" in capsys.readouterr().err


def test_bad_rule_file_exits_one(synth_dir, tmp_path):
    rules = tmp_path / "bad.txt"
    rules.write_text("respnse(Rev, Exam)\n")
    assert main(["train", "--log", str(synth_dir / "log.csv"), "--rules", str(rules), "--out", str(tmp_path)]) == 1


def test_train_then_evaluate(synth_dir, tmp_path, capsys):
    run = tmp_path / "run"
    code = main(["train", "--log", str(synth_dir / "log.csv"), "--rules", str(synth_dir / "rules.txt"),
                 "--variant", "two-stage", "--seed", "1", "--out", str(run), *SMALL])
    assert code == 0
    for name in ("checkpoint.json", "satisfaction.csv", "split.json", "metrics.json", "pruning_report.json"):
        assert (run / name).exists(), name
    manifest = json.loads((run / "manifest.json").read_text())
    metrics = json.loads((run / "metrics.json").read_text())
    assert metrics["manifest_id"] == manifest["id"]
    assert manifest["config"]["resolved"]["ep"] == 1
    capsys.readouterr()
    code = main(["evaluate", "--checkpoint", str(run / "checkpoint.json"), "--log", str(synth_dir / "log.csv"),
                 "--split", "temporal"])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["metrics"]["f1"] == metrics["test"]["f1"]
    assert report["manifest_id"] == manifest["id"]


def test_evaluate_missing_checkpoint(synth_dir):
    assert main(["evaluate", "--checkpoint", "nope.json", "--log", str(synth_dir / "log.csv")]) == 1


def test_config_file_and_flag_precedence(synth_dir, tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('variant = "ltn-data"\nep = 1\nef = 3\nhidden = 6\nembed_dim = 4\n')
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--log", str(synth_dir / "log.csv"), "--ef", "2",
                 "--out", str(run)]) == 0
    resolved = json.loads((run / "manifest.json").read_text())["config"]["resolved"]
    assert resolved["variant"] == "ltn_data" and resolved["ep"] == 1 and resolved["ef"] == 2
    assert resolved["encoder"]["hidden"] == 6


def test_unknown_config_key_is_rejected(synth_dir, tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("warp_speed = 9\n")
    assert main(["train", "--config", str(cfg), "--log", str(synth_dir / "log.csv")]) == 1


def test_seed_parsing():
    assert parse_seeds("5") == [1, 2, 3, 4, 5]
    assert parse_seeds("3,9") == [3, 9]


def experiment(synth_dir, out):
    return main(["experiment", "--log", str(synth_dir / "log.csv"), "--rules", str(synth_dir / "rules.txt"),
                 "--variants", "lstm-bce,ltn-data,ltn-nop,two-stage", "--seeds", "2", "--split", "compliance",
                 "--enrichment", "0.3", "--out", str(out), *SMALL])


def test_experiment_is_reproducible(synth_dir, tmp_path):
    assert experiment(synth_dir, tmp_path / "a") == 0
    assert experiment(synth_dir, tmp_path / "b") == 0
    a, b = (tmp_path / "a" / "metrics.csv").read_bytes(), (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a == b
    rows = a.decode().splitlines()
    assert rows[0] == "variant,dataset,accuracy_mean,accuracy_std,f1_mean,f1_std,n_runs"
    assert [r.split(",")[0] for r in rows[1:]] == ["bce_baseline", "ltn_data", "ltn_nop", "two_stage"]
    assert (tmp_path / "a" / "runs.csv").read_bytes() == (tmp_path / "b" / "runs.csv").read_bytes()
    ids = [json.loads((tmp_path / d / "manifest.json").read_text())["id"] for d in ("a", "b")]
    assert ids[0] == ids[1]


def test_suggest_prints_candidates(synth_dir, capsys):
    assert main(["suggest", "--log", str(synth_dir / "log.csv"), "--min-support", "5"]) == 0
    out = capsys.readouterr().out
    assert "existence(Reg)" in out
