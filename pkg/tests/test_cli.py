import json
import logging

import numpy as np
import pytest

from sbgnn.cli import main
from sbgnn.dataset import load_dataset
from sbgnn.model import init_params, save_params


def run(*argv):
    return main([str(a) for a in argv])


def _synth(out, *extra):
    return run("synth", "--classes", 2, "--graphs-per-class", 8, "--nodes", 9,
               "--timesteps", 48, "--seed", 3, "--out", out, *extra)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert _synth(root / "ts") == 0
    assert run("build", "--ts-dir", root / "ts", "--out", root / "data") == 0
    (root / "cfg.json").write_text(json.dumps({"epochs": 3, "hidden": 8}))
    assert run("train", "--data", root / "data", "--config", root / "cfg.json",
               "--runs", 2, "--out", root / "runs") == 0
    return root


def _error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return err[-1]


def test_synth_counts(tmp_path):
    assert run("synth", "--classes", 2, "--graphs-per-class", 3, "--nodes", 9,
               "--timesteps", 20, "--out", tmp_path / "ts") == 0
    files = sorted(p.name for p in (tmp_path / "ts").iterdir())
    assert len([f for f in files if f.startswith("subject_")]) == 6
    lines = (tmp_path / "ts" / "labels.csv").read_text().splitlines()
    assert lines[0] == "id,label" and len(lines) == 7


def test_synth_deterministic(tmp_path):
    _synth(tmp_path / "a")
    _synth(tmp_path / "b")
    for p in (tmp_path / "a").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_synth_seed_from_environment(tmp_path, monkeypatch):
    args = ("synth", "--graphs-per-class", 2, "--nodes", 9, "--timesteps", 20)
    monkeypatch.setenv("SBGNN_SEED", "5")
    run(*args, "--out", tmp_path / "env")
    run(*args, "--seed", 5, "--out", tmp_path / "flag")
    run(*args, "--seed", 6, "--out", tmp_path / "other")
    name = "subject_00000_ts.csv"
    env = (tmp_path / "env" / name).read_bytes()
    assert env == (tmp_path / "flag" / name).read_bytes()
    assert env != (tmp_path / "other" / name).read_bytes()


def test_synth_rejects_rho_order(tmp_path, capsys):
    code = run("synth", "--rho-in", 0.3, "--rho-out", 0.5, "--out", tmp_path / "ts")
    assert code != 0
    assert _error_line(capsys).startswith("error:")
    assert not (tmp_path / "ts").exists()


def test_refuses_non_empty_out(tmp_path, capsys):
    out = tmp_path / "ts"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert _synth(out) == 1
    assert "not empty" in _error_line(capsys)
    assert _synth(out, "--force") == 0
    assert (out / "keep.txt").exists()


def test_unknown_flag_rejected(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        run("synth", "--out", tmp_path / "ts", "--bogus", 1)
    assert info.value.code == 2
    assert _error_line(capsys).startswith("error:")


def test_build_default_manifest(workspace):
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert manifest["feature_mode"] == "corr-row"
    assert len(manifest["graphs"]) == 16
    d = load_dataset(workspace / "data")
    assert d.n_features == 9 and d.n_classes == 2


def test_build_timeseries_features(workspace, tmp_path):
    assert run("build", "--ts-dir", workspace / "ts", "--features", "timeseries",
               "--out", tmp_path / "d") == 0
    d = load_dataset(tmp_path / "d")
    assert all(g.features.shape == (9, 48) for g in d.graphs)
    first = (tmp_path / "d" / f"{d.graphs[0].graph_id}_x.csv").read_text().splitlines()[0]
    assert len(first.split(",")) == 48


def test_build_high_threshold_warns(workspace, tmp_path, caplog):
    with caplog.at_level(logging.WARNING, logger="sbgnn"):
        assert run("build", "--ts-dir", workspace / "ts", "--threshold", 0.99,
                   "--out", tmp_path / "d") == 0
    d = load_dataset(tmp_path / "d")
    assert all(g.n_edges == 0 for g in d.graphs)
    warned = [r.getMessage() for r in caplog.records if r.levelno == logging.WARNING]
    assert warned and "16 graph(s) have no edges" in warned[0]


def test_build_dump_spectrum(workspace, tmp_path):
    assert run("build", "--ts-dir", workspace / "ts", "--out", tmp_path / "d", "--dump-spectrum") == 0
    dumps = list((tmp_path / "d" / "spectra").iterdir())
    assert len(dumps) == 16
    assert len(dumps[0].read_text().splitlines()) == 10


def test_build_missing_subject(workspace, tmp_path, capsys):
    ts = tmp_path / "ts"
    ts.mkdir()
    (ts / "labels.csv").write_text((workspace / "ts" / "labels.csv").read_text())
    assert run("build", "--ts-dir", ts, "--out", tmp_path / "d") == 1
    line = _error_line(capsys)
    assert line.startswith("error:") and "subject_00000_ts.csv not found" in line
    assert not (tmp_path / "d").exists()


def test_build_leaves_input_untouched(workspace, tmp_path):
    before = {p.name: p.read_bytes() for p in (workspace / "ts").iterdir()}
    run("build", "--ts-dir", workspace / "ts", "--out", tmp_path / "d")
    assert before == {p.name: p.read_bytes() for p in (workspace / "ts").iterdir()}


def test_train_writes_summary(workspace):
    summary = json.loads((workspace / "runs" / "summary.json").read_text())
    assert summary["stats"]["n"] == 2 and not summary["stats"]["single_run"]
    assert summary["config"]["epochs"] == 3
    assert (workspace / "runs" / "run_1" / "model.json").is_file()


def test_train_single_run_flag(workspace, tmp_path):
    assert run("train", "--data", workspace / "data", "--config", workspace / "cfg.json",
               "--runs", 1, "--out", tmp_path / "r") == 0
    stats = json.loads((tmp_path / "r" / "summary.json").read_text())["stats"]
    assert stats["n"] == 1 and stats["single_run"] and stats["std"]["accuracy"] == 0


def test_train_rerun_identical(workspace, tmp_path):
    run("train", "--data", workspace / "data", "--config", workspace / "cfg.json",
        "--runs", 2, "--out", tmp_path / "r")
    assert (tmp_path / "r" / "summary.json").read_bytes() == (workspace / "runs" / "summary.json").read_bytes()


def test_train_all_runs_failing(workspace, tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"epochs": 1, "lr": 1e308, "hidden": 4}))
    assert run("train", "--data", workspace / "data", "--config", cfg, "--runs", 2,
               "--out", tmp_path / "r") == 1
    assert "all 2 runs failed" in _error_line(capsys)
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert [r["status"] for r in summary["runs"]] == ["failed", "failed"]


def test_train_bad_config(workspace, tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"epochs": 0}))
    assert run("train", "--data", workspace / "data", "--config", cfg, "--out", tmp_path / "r") == 1
    assert _error_line(capsys).startswith("error:")


def test_eval_reproduces_run_metrics(workspace, tmp_path):
    run_entry = json.loads((workspace / "runs" / "summary.json").read_text())["runs"][1]
    assert run("eval", "--model", workspace / "runs" / "run_1" / "model.json",
               "--data", workspace / "data", "--split-seed", run_entry["seed"],
               "--out", tmp_path / "e") == 0
    metrics = json.loads((tmp_path / "e" / "metrics.json").read_text())
    for key, value in run_entry["test"].items():
        assert metrics[key] == value
    rows = (tmp_path / "e" / "attention.csv").read_text().splitlines()
    assert rows[0] == "graph_id,node_index,weight"
    ids = [r.split(",")[0] for r in rows[1:]]
    assert len(ids) == 9 * metrics["n_test"]
    assert all(ids.count(i) == 9 for i in set(ids))
    cm = (tmp_path / "e" / "confusion.csv").read_text().splitlines()
    assert cm[0] == "true/pred,class_0,class_1"


def test_eval_width_mismatch(workspace, tmp_path, capsys):
    model = tmp_path / "m.json"
    save_params(init_params(20, 8, 2), model)
    assert run("eval", "--model", model, "--data", workspace / "data", "--out", tmp_path / "e") == 1
    assert "feature width 20 ≠ 9" in _error_line(capsys)


def test_report_self_comparison(workspace, capsys):
    assert run("report", "--runs", workspace / "runs", "--ttest", workspace / "runs") == 0
    out = capsys.readouterr().out
    assert "runs: 2" in out and "accuracy" in out
    assert "t = 0, df = 1, p = 1" in out


def test_report_different_configs(workspace, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 1, "hidden": 4, "seed": 40}))
    run("train", "--data", workspace / "data", "--config", cfg, "--runs", 2, "--out", tmp_path / "r")
    capsys.readouterr()
    assert run("report", "--runs", workspace / "runs", "--ttest", tmp_path / "r") == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    t = float(line.split("t = ")[1].split(",")[0])
    p = float(line.rsplit("p = ", 1)[1])
    assert np.isfinite(t) and 0 < p <= 1


def test_report_unequal_counts(workspace, tmp_path, capsys):
    run("train", "--data", workspace / "data", "--config", workspace / "cfg.json",
        "--runs", 1, "--out", tmp_path / "r")
    assert run("report", "--runs", workspace / "runs", "--ttest", tmp_path / "r") == 1
    assert "unequal size (2 vs 1)" in _error_line(capsys)


def test_gradcheck_default(capsys):
    assert run("gradcheck") == 0
    first = capsys.readouterr().out.strip()
    assert first.startswith("max rel err") and first.endswith("< 1e-4, PASS")
    run("gradcheck")
    assert capsys.readouterr().out.strip() == first


def test_gradcheck_rejects_tiny_graph(capsys):
    assert run("gradcheck", "--nodes", 2) == 1
    assert _error_line(capsys).startswith("error: --nodes")


def test_gradcheck_sweep(capsys):
    assert run("gradcheck", "--sweep") == 0
    assert capsys.readouterr().out.strip().endswith("PASS")
