import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from cdesurv import pipeline
from cdesurv.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from cdesurv.config import ABLATIONS, RunConfig
from cdesurv.errors import ConfigError
from cdesurv.metrics import c_index_ipcw
from cdesurv.model import SurvivalModel

SMALL = """
n_patients = 60
d_features = 4
window_h = 12
obs_rate = 0.3
latent_dim = 3
g_hidden = 8
f_hidden = 8
head_hidden = 8
epochs = 2
patience = 2
batch_size = 16
n_field_samples = 64
cluster_restarts = 2
knn = 5
"""


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return path


def run(*args):
    return main([str(a) for a in args])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- config ---------------------------------------------------------------------

def test_config_round_trip():
    cfg = RunConfig(n_patients=77, lr=3e-4, use_tacl=False, f_hidden="16,16")
    assert RunConfig.from_text(cfg.to_text()) == cfg


def test_config_errors():
    with pytest.raises(ConfigError):
        RunConfig.from_text("nonsense_key = 1")
    with pytest.raises(ConfigError):
        RunConfig.from_text("epochs = many")
    with pytest.raises(ConfigError):
        RunConfig.from_text("just words")
    with pytest.raises(ConfigError):
        RunConfig(kappa1=0.0)
    with pytest.raises(ConfigError):
        RunConfig(split_fracs="0.5,0.5,0.5")
    with pytest.raises(ConfigError):
        RunConfig(f_hidden="64,x")
    with pytest.raises(ConfigError):
        RunConfig().with_ablation("a9")


def test_config_defaults_and_comments():
    cfg = RunConfig.from_text("# comment\nalpha = 0.5  # trailing\n\n")
    assert cfg.alpha == 0.5 and cfg.kappa1 == 2.0 and cfg.kappa2 == 30.0 and cfg.delta == 20.0
    assert cfg.latent_dim == 64 and cfg.epochs == 100 and cfg.patience == 5


def test_ablation_mapping():
    assert RunConfig().with_ablation("a1").use_time_mask is False
    a2 = RunConfig().with_ablation("a2")
    assert a2.use_tacl is False and a2.use_ranking_loss is True
    a3 = RunConfig().with_ablation("a3")
    assert a3.use_tacl is False and a3.use_ranking_loss is False
    assert set(ABLATIONS) == {"none", "a1", "a2", "a3"}


def test_digest_ignores_analysis_keys():
    cfg = RunConfig()
    assert cfg.digest() == cfg.override(n_clusters=7, knn=3).digest()
    assert cfg.digest() != cfg.override(alpha=0.5).digest()


# -- commands -------------------------------------------------------------------

def test_full_pipeline(tmp_path, small_cfg):
    out = tmp_path / "run"
    assert run("train", "--config", small_cfg, "--out", out) == EXIT_OK
    for name in ("config.snapshot", "checkpoint.bin", "logs/epoch.csv"):
        assert (out / name).exists()
    log = read_csv(out / "logs/epoch.csv")
    assert len(log) >= 1 and all(float(r["l_tacl"]) > 0 for r in log)

    assert run("evaluate", "--out", out) == EXIT_OK
    report = pipeline.read_report(out)
    flat = dict(line.split("=", 1) for line in (out / "metrics.report").read_text().splitlines())
    assert float(flat["c_index"]) == report.c_index
    js = json.loads((out / "metrics.json").read_text())
    assert js["c_index"] == report.c_index and js["eval_times"] == report.eval_times
    for v in (report.c_index, report.brier, report.auc):
        assert 0 <= v <= 1
    for name in ("risk.csv", "calibration.csv", "alignment.csv"):
        assert (out / "eval" / name).exists()

    assert run("interpret", "--out", out) == EXIT_OK
    imp = read_csv(out / "interpret/importance.csv")
    assert [r["rank"] for r in imp] == ["1", "2", "3", "4"]
    scores = [float(r["score"]) for r in imp]
    assert scores == sorted(scores, reverse=True)
    rel = read_csv(out / "interpret/relevance_long.csv")
    assert len(rel) == 16

    assert run("cluster", "--out", out, "--clusters", 2) == EXIT_OK
    assign = read_csv(out / "interpret/cluster_assignments.csv")
    assert len(assign) == 12 and {r["cluster"] for r in assign} <= {"0", "1"}
    for name in ("cluster_centroids.csv", "cluster_severity.csv", "cluster_km.csv"):
        assert (out / "interpret" / name).exists()


def test_ablation_logs_zero_tacl(tmp_path, small_cfg):
    out = tmp_path / "a2"
    assert run("train", "--config", small_cfg, "--out", out, "--ablation", "a2") == EXIT_OK
    assert all(float(r["l_tacl"]) == 0.0 for r in read_csv(out / "logs/epoch.csv"))
    assert "use_tacl = false" in (out / "config.snapshot").read_text()


def test_evaluate_refuses_mismatched_config(tmp_path, small_cfg, capsys):
    out = tmp_path / "run"
    assert run("train", "--config", small_cfg, "--out", out) == EXIT_OK
    assert run("evaluate", "--config", small_cfg, "--out", out, "--set", "alpha=0.5") == EXIT_CONFIG
    assert "refusing" in capsys.readouterr().err


def test_evaluate_without_checkpoint(tmp_path, small_cfg):
    assert run("evaluate", "--config", small_cfg, "--out", tmp_path / "none") == EXIT_CONFIG


def test_oracle_mode(tmp_path):
    out = tmp_path / "oracle"
    assert run("evaluate", "--oracle-risk", "--out", out) == EXIT_OK
    assert pipeline.read_report(out).c_index >= 0.95


def test_untrained_model_near_chance():
    cfg = RunConfig()
    ws = pipeline.load_data(cfg)
    co = ws.cohort
    tr, te = co.indices("train"), co.indices("test")
    t_tr, e_tr = co.labels(tr)
    t_te, e_te = co.labels(te)
    for seed in (0, 1):
        model = SurvivalModel(cfg.model(len(co.feature_names)), seed=seed)
        r = model.predict_risk([ws.paths[i] for i in te])
        cs = [c_index_ipcw(r, t_tr, e_tr, t_te, e_te, tau=q) for q in np.percentile(t_te, [25, 50, 75])]
        assert 0.35 <= np.mean(cs) <= 0.65


def test_simulate_then_csv_training(tmp_path, small_cfg):
    sim = tmp_path / "sim"
    assert run("simulate", "--config", small_cfg, "--out", sim) == EXIT_OK
    for name in ("observations.csv", "labels.csv", "severity.csv", "truth.csv"):
        assert (sim / "data" / name).exists()
    out = tmp_path / "fromcsv"
    assert run("train", "--config", small_cfg, "--out", out,
               "--set", "data_source=csv", "--set", f"csv_dir={sim / 'data'}", "--set", "min_observed=0") == EXIT_OK
    assert run("evaluate", "--out", out) == EXIT_OK


def test_exit_codes(tmp_path, small_cfg, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 3\n")
    assert run("train", "--config", bad, "--out", tmp_path / "x") == EXIT_CONFIG
    assert run("train", "--config", tmp_path / "missing.cfg", "--out", tmp_path / "x") == EXIT_CONFIG
    assert run("train", "--config", small_cfg, "--out", tmp_path / "y",
               "--set", "data_source=csv", "--set", f"csv_dir={tmp_path / 'nowhere'}") == EXIT_DATA
    assert run("train", "--config", small_cfg, "--out", tmp_path / "z", "--set", "field_scale=1e300") == EXIT_NUMERIC
    err = capsys.readouterr().err
    assert "config error" in err and "data error" in err and "numeric divergence" in err


def test_seed_flag_changes_run(tmp_path, small_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("train", "--config", small_cfg, "--out", a, "--seed", 1) == EXIT_OK
    assert run("train", "--config", small_cfg, "--out", b, "--seed", 2) == EXIT_OK
    assert (a / "checkpoint.bin").read_bytes() != (b / "checkpoint.bin").read_bytes()
    assert "seed = 1" in (a / "config.snapshot").read_text()


def test_deterministic_subprocess(tmp_path, small_cfg):
    env = {k: v for k, v in os.environ.items() if not k.endswith("_NUM_THREADS")}
    outs = []
    for k in range(2):
        out = tmp_path / f"d{k}"
        for cmd in ("train", "evaluate"):
            proc = subprocess.run(
                [sys.executable, "-m", "cdesurv", cmd, "--config", str(small_cfg), "--out", str(out),
                 "--deterministic", "--seed", "3"],
                env=env, capture_output=True, text=True,
            )
            assert proc.returncode == 0, proc.stderr
        outs.append(out)
    for name in ("checkpoint.bin", "metrics.report", "metrics.json", "logs/epoch.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
