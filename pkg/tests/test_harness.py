import csv
import json

import numpy as np
import pytest

from crl_mmnar import config as cfgmod
from crl_mmnar import harness
from crl_mmnar.cli import main
from crl_mmnar.datagen import read_jsonl

TINY = """\
[data]
n_patients = 400
seed = 3
[model]
embed_dim = 16
encoder_hidden = 16
z_dim = 8
miss_hidden = 8
heads = 2
head_hidden = 8
[optim]
learning_rate = 0.002
[train]
max_epochs = 4
patience = 2
[run]
seeds = 0, 1
"""


@pytest.fixture()
def tiny(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


@pytest.fixture(scope="module")
def tiny_cfg():
    return cfgmod.loads(TINY)


def test_train_writes_artifacts(tiny_cfg, tmp_path):
    res = harness.train(tiny_cfg, 0, out_dir=tmp_path)
    assert res.status == "ok" and 1 <= res.best_epoch <= 4
    for name in ("model.ckpt", "config.ini", "curve.csv", "metrics.csv", "metrics.json", "rectifier.tsv"):
        assert (tmp_path / name).exists(), name
    rows = list(csv.DictReader((tmp_path / "curve.csv").open()))
    assert [int(r["epoch"]) for r in rows] == list(range(1, len(rows) + 1))
    assert cfgmod.load(tmp_path / "config.ini") == tiny_cfg
    metrics = list(csv.DictReader((tmp_path / "metrics.csv").open()))
    assert {r["rectified"] for r in metrics} == {"false", "true"}
    assert {r["task"] for r in metrics} == set(tiny_cfg.data.tasks)


def test_training_never_sees_hidden_truth(tiny_cfg, monkeypatch):
    seen = []
    real = harness.fit

    def spy(model, cfg, tr, va, seed, max_epochs=None):
        seen.extend([tr.hidden, va.hidden])
        return real(model, cfg, tr, va, seed, max_epochs)

    monkeypatch.setattr(harness, "fit", spy)
    harness.train(tiny_cfg, 0)
    assert seen == [None, None]


def test_divergence_is_recorded(tiny_cfg, tmp_path):
    bad = tiny_cfg.with_value("optim.learning_rate", "1e300")
    res = harness.train(bad, 0, out_dir=tmp_path)
    assert res.status == "diverged"
    record = json.loads((tmp_path / "failure.json").read_text())
    assert record["epoch"] >= 1 and record["batch"] >= 0 and record["status"] == "diverged"
    assert not (tmp_path / "model.ckpt").exists()


def test_checkpoint_reload_reproduces_test_metrics(tiny_cfg, tmp_path):
    res = harness.train(tiny_cfg, 1, out_dir=tmp_path)
    ds = harness.load_dataset(tiny_cfg)
    run = harness.load_run(tmp_path / "model.ckpt", ds, expected=tiny_cfg)
    reps = harness.evaluate_run(run, harness.select_split(run.config, ds, "test"))
    assert reps[0].to_json() == res.reports[False].to_json()
    assert reps[1].to_json() == res.reports[True].to_json()


def test_hash_mismatch_needs_force(tiny_cfg, tmp_path):
    harness.train(tiny_cfg, 0, out_dir=tmp_path)
    other = tiny_cfg.with_value("model.dropout", "0.4")
    ds = harness.load_dataset(tiny_cfg)
    with pytest.raises(harness.ConfigMismatch):
        harness.load_run(tmp_path / "model.ckpt", ds, expected=other)
    assert harness.load_run(tmp_path / "model.ckpt", ds, expected=other, force=True).seed == 0


def test_baseline_has_no_rectified_rows(tiny_cfg):
    res = harness.baseline(tiny_cfg, "mean_impute", 0)
    assert set(res.reports) == {False}
    with pytest.raises(ValueError):
        harness.baseline(tiny_cfg, "knn", 0)


def test_run_seeds_summary(tiny_cfg, tmp_path):
    harness.run_seeds(tiny_cfg, out_dir=tmp_path)
    assert (tmp_path / "seed_0" / "model.ckpt").exists() and (tmp_path / "seed_1" / "model.ckpt").exists()
    summary = list(csv.DictReader((tmp_path / "summary.csv").open()))
    assert len(summary) == 6 and all(r["n_seeds"] == "2" for r in summary)


def test_aggregate_uses_sample_sd(tiny_cfg):
    reps = [harness.train(tiny_cfg, s, max_epochs=1).reports[False] for s in (0, 1)]
    agg = harness.aggregate(reps)
    aucs = [r.overall["icu"].auc for r in reps]
    assert agg["icu"]["auc"] == pytest.approx((np.mean(aucs), np.std(aucs, ddof=1)))


def test_ablation_table_layout(tiny_cfg):
    one_seed = cfgmod.loads(TINY.replace("seeds = 0, 1", "seeds = 0"))
    result = harness.ablate(one_seed, max_epochs=1)
    table = result.table()
    assert [r["row"] for r in table] == list(harness.ABLATION_ROWS)
    for t in one_seed.data.tasks:
        assert table[0][f"{t}_dauc"] is None
        for prev, cur in zip(table, table[1:]):
            assert cur[f"{t}_dauc"] == pytest.approx(cur[f"{t}_auc"] - prev[f"{t}_auc"])
    assert len(result.to_csv().splitlines()) == 5
    assert "zero_fill" in result.baselines


def test_sweep_emits_one_row_per_value(tiny_cfg, tmp_path):
    one_seed = cfgmod.loads(TINY.replace("seeds = 0, 1", "seeds = 0"))
    rows = harness.sweep(one_seed, "model.dropout", dataset=None, out_dir=tmp_path, max_epochs=1)
    assert [r["value"] for r in rows] == ["0.1", "0.2", "0.3", "0.4", "0.5"]
    assert len((tmp_path / "sweep.csv").read_text().splitlines()) == 6


# ------------------------------------------------------------------ command line

def test_cli_gen_data_is_deterministic(tiny, tmp_path, capsys):
    assert main(["gen-data", str(tiny), "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-data", str(tiny), "--out", str(tmp_path / "b")]) == 0
    a, b = (tmp_path / "a" / "data.jsonl").read_bytes(), (tmp_path / "b" / "data.jsonl").read_bytes()
    assert a == b
    assert len(read_jsonl(tmp_path / "a" / "data.jsonl")) == 400
    assert main(["gen-data", str(tiny), "--seed", "9", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "data.jsonl").read_bytes() != a


def test_cli_train_then_evaluate(tiny, tmp_path):
    assert main(["train", str(tiny), "--seed", "0", "--out", str(tmp_path / "run")]) == 0
    ckpt = tmp_path / "run" / "seed_0" / "model.ckpt"
    assert main(["evaluate", str(tiny), "--checkpoint", str(ckpt), "--out", str(tmp_path / "ev")]) == 0
    trained = (tmp_path / "run" / "seed_0" / "metrics.csv").read_text()
    assert (tmp_path / "ev" / "metrics.csv").read_text() == trained
    assert main(["probe", str(tiny), "--checkpoint", str(ckpt), "--out", str(tmp_path / "pr")]) == 0
    probe = json.loads((tmp_path / "pr" / "probe.json").read_text())
    assert 0.0 <= probe["accuracy"] <= 1.0
    assert main(["rectify", str(tiny), "--checkpoint", str(ckpt), "--kappa", "0.02",
                 "--out", str(tmp_path / "rc")]) == 0
    assert (tmp_path / "rc" / "rectifier.tsv").exists()


def test_cli_evaluate_refuses_mismatched_config(tiny, tmp_path, capsys):
    assert main(["train", str(tiny), "--seed", "0", "--out", str(tmp_path / "run")]) == 0
    changed = tmp_path / "changed.ini"
    changed.write_text(TINY.replace("head_hidden = 8", "head_hidden = 8\ndropout = 0.3"))
    ckpt = str(tmp_path / "run" / "seed_0" / "model.ckpt")
    assert main(["evaluate", str(changed), "--checkpoint", ckpt, "--out", str(tmp_path / "e")]) == 3
    assert "hash" in capsys.readouterr().err
    assert main(["evaluate", str(changed), "--checkpoint", ckpt, "--force", "--out", str(tmp_path / "e")]) == 0


def test_cli_bad_config_exits_with_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nbogus = 1\n")
    assert main(["train", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "bogus" in capsys.readouterr().err


def test_total_loss_falls_over_first_five_epochs_on_defaults():
    cfg = cfgmod.RunConfig()
    ds = harness.load_dataset(cfg)
    falling = 0
    for seed in cfg.seeds:
        res = harness.train(cfg, seed, ds, max_epochs=5)
        totals = [row["train_total"] for row in res.history]
        falling += all(b < a for a, b in zip(totals, totals[1:]))
    assert falling >= 4
