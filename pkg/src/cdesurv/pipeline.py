"""End-to-end commands: simulate, train, evaluate, interpret and cluster.

Every command writes into one output directory with fixed file names::

    config.snapshot   checkpoint.bin   metrics.report   metrics.json
    logs/epoch.csv    eval/*.csv       interpret/*.csv  data/*.csv
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .controlpath import ControlPath
from .data import Cohort, CsvPaths, export_csv, generate_synthetic, ingest_csv, prepare, control_paths
from .errors import ConfigError, DataError, UndefinedMetricError
from .interpret import (
    attach_outcomes,
    average_field,
    cluster_trajectories,
    feature_importance,
    feature_relevance,
    phenotype_map,
)
from .metrics import EvalReport, alignment_spearman, calibration_bins, quartile_eval
from .model import SurvivalModel, TrainResult, load_checkpoint, save_checkpoint, train
from .survhead import breslow_baseline, predict_survival

SNAPSHOT = "config.snapshot"
CHECKPOINT = "checkpoint.bin"
REPORT = "metrics.report"
REPORT_JSON = "metrics.json"
EPOCH_LOG = "logs/epoch.csv"


@dataclass
class Workspace:
    cfg: RunConfig
    cohort: Cohort
    paths: list[ControlPath]


def load_data(cfg: RunConfig) -> Workspace:
    """Build or read the cohort, split and standardize it, and build control paths."""
    if cfg.data_source == "synthetic":
        raw = generate_synthetic(cfg.generator())
    else:
        csv_paths = CsvPaths.in_dir(cfg.csv_dir)
        if not csv_paths.observations.exists() or not csv_paths.labels.exists():
            raise DataError(f"{cfg.csv_dir}: observations.csv and labels.csv are required")
        names = cfg.feature_list() or _features_in_file(csv_paths.observations)
        raw = ingest_csv(csv_paths, names, min_observed=cfg.min_observed, window_h=float(cfg.window_h))
        if len(raw) == 0:
            raise DataError("no patient has a usable observation row")
    cohort = prepare(raw, cfg.split(), seed=cfg.effective_split_seed)
    return Workspace(cfg, cohort, control_paths(cohort.records, cfg.path_scheme))


def _features_in_file(path: Path) -> list[str]:
    names = set()
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            names.add(row["feature"])
    return sorted(names)


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(x) for x in row])


def _cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return x


def write_snapshot(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / SNAPSHOT).write_text(cfg.to_text(), encoding="utf-8")


# -- commands -----------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, out) -> CsvPaths:
    out = Path(out)
    write_snapshot(cfg, out)
    return export_csv(generate_synthetic(cfg.generator()), out / "data")


def cmd_train(cfg: RunConfig, out, ws: Workspace | None = None, progress=None) -> tuple[SurvivalModel, TrainResult]:
    out = Path(out)
    write_snapshot(cfg, out)
    ws = ws or load_data(cfg)
    model = SurvivalModel(cfg.model(len(ws.cohort.feature_names)), seed=cfg.seed)
    result = train(model, ws.cohort, ws.paths, cfg.training(), log_path=out / EPOCH_LOG, progress=progress)
    save_checkpoint(model, out / CHECKPOINT, cfg.digest())
    return model, result


def restore_model(cfg: RunConfig, out, ws: Workspace) -> SurvivalModel:
    ckpt = Path(out) / CHECKPOINT
    if not ckpt.exists():
        raise ConfigError(f"no checkpoint at {ckpt}; run train first")
    model = SurvivalModel(cfg.model(len(ws.cohort.feature_names)), seed=cfg.seed)
    load_checkpoint(model, ckpt, expected_hash=cfg.digest())
    return model


def cmd_evaluate(cfg: RunConfig, out, ws: Workspace | None = None, oracle: bool = False) -> EvalReport:
    """Quartile metrics on the test split, hourly alignment and calibration tables.

    With ``oracle`` the generator's stored ground-truth risk replaces the model
    (synthetic cohorts only); no checkpoint is needed.
    """
    out = Path(out)
    ws = ws or load_data(cfg)
    co = ws.cohort
    tr, te = co.indices("train"), co.indices("test")
    if te.size == 0:
        raise DataError("test split is empty")
    train_t, train_e = co.labels(tr)
    test_t, test_e = co.labels(te)
    model = None
    if oracle:
        risk_all = np.array([np.nan if r.risk is None else r.risk for r in co.records])
        if np.isnan(risk_all).any():
            raise DataError("oracle evaluation needs ground-truth risk for every patient")
        train_r, test_r = risk_all[tr], risk_all[te]
    else:
        model = restore_model(cfg, out, ws)
        train_r = model.predict_risk([ws.paths[i] for i in tr])
        test_r = model.predict_risk([ws.paths[i] for i in te])
    baseline = breslow_baseline(train_r, train_t, train_e)
    report = quartile_eval(test_r, train_t, train_e, test_t, test_e,
                           surv_fn=lambda t: predict_survival(test_r, baseline, t))
    out.mkdir(parents=True, exist_ok=True)
    (out / REPORT).write_text(report.to_text(), encoding="utf-8")
    (out / REPORT_JSON).write_text(report.to_json(), encoding="utf-8")

    _write_csv(out / "eval" / "risk.csv", ["patient_id", "risk", "time_to_event_h", "event"],
               [(co.records[i].id, r, t, e) for i, r, t, e in zip(te, test_r, test_t, test_e)])
    rows = []
    for t in report.eval_times:
        cb = calibration_bins(predict_survival(test_r, baseline, t), test_t, test_e, t, cfg.calibration_bins)
        for b in range(cfg.calibration_bins):
            rows.append((t, b, cb.edges[b], cb.edges[b + 1], cb.mean_predicted[b], cb.observed[b], cb.counts[b]))
    _write_csv(out / "eval" / "calibration.csv",
               ["eval_time_h", "bin", "lower", "upper", "mean_predicted", "observed", "count"], rows)
    if model is not None:
        trajs = model.trajectories([ws.paths[i] for i in te])
        align = hourly_alignment(trajs, co.subset(te), cfg.delta, cfg.window_h)
        _write_csv(out / "eval" / "alignment.csv", ["hour", "n_patients", "spearman"], align)
    return report


def hourly_alignment(trajs, records, delta: float, window_h: int):
    """Spearman rho between latent and label distances among patients present at each hour."""
    rows = []
    for hour in range(window_h + 1):
        z, lab = [], []
        for tr, rec in zip(trajs, records):
            if rec.severity is None or hour >= tr.grid_states.shape[0]:
                continue
            s, v = rec.severity.at(float(hour))
            z.append(tr.grid_states[hour])
            lab.append(np.concatenate([s, delta * v]))
        if len(z) >= 3:
            rows.append((hour, len(z), alignment_spearman(np.array(z), np.array(lab))))
    return rows


def mean_alignment(rows, lo: int = 8, hi: int = 28) -> float:
    vals = [rho for hour, _, rho in rows if lo <= hour <= hi and np.isfinite(rho)]
    if not vals:
        raise UndefinedMetricError(f"no alignment values between hours {lo} and {hi}")
    return float(np.mean(vals))


def cmd_interpret(cfg: RunConfig, out, ws: Workspace | None = None):
    out = Path(out)
    ws = ws or load_data(cfg)
    model = restore_model(cfg, out, ws)
    trajs = model.trajectories(ws.paths)
    fld = average_field(model.encoder, trajs, n_samples=cfg.n_field_samples, seed=cfg.seed)
    names = ws.cohort.feature_names
    ranking = feature_importance(fld, names)
    rel = feature_relevance(fld)
    d = out / "interpret"
    _write_csv(d / "importance.csv", ["rank", "feature", "score"],
               [(k + 1, n, s) for k, (n, s) in enumerate(ranking)])
    _write_csv(d / "time_channel.csv", ["column", "norm"], [("time", fld.time_column_norm)])
    _write_csv(d / "relevance.csv", ["feature", *names], [(n, *rel[k]) for k, n in enumerate(names)])
    _write_csv(d / "relevance_long.csv", ["feature_a", "feature_b", "cosine"],
               [(a, b, rel[i, j]) for i, a in enumerate(names) for j, b in enumerate(names)])
    _write_csv(d / "average_field.csv", ["latent", *names, "time"],
               [(i, *fld.matrix[i]) for i in range(fld.matrix.shape[0])])
    return fld, ranking, rel


def cmd_cluster(cfg: RunConfig, out, ws: Workspace | None = None, n_clusters: int | None = None):
    """Cluster test-split latent trajectories and write centroids, profiles and KM curves."""
    out = Path(out)
    ws = ws or load_data(cfg)
    model = restore_model(cfg, out, ws)
    co = ws.cohort
    te = co.indices("test")
    recs = co.subset(te)
    trajs = model.trajectories([ws.paths[i] for i in te])
    k = n_clusters or cfg.n_clusters
    res = cluster_trajectories([t.grid_states for t in trajs], k, seed=cfg.seed, n_init=cfg.cluster_restarts)
    times, events = co.labels(te)
    sev = [r.severity.s if r.severity is not None else np.zeros((1, 1)) for r in recs]
    res = attach_outcomes(res, sev, times, events)
    d = out / "interpret"
    _write_csv(d / "cluster_assignments.csv", ["patient_id", "cluster", "name"],
               [(r.id, c, res.names[c]) for r, c in zip(recs, res.assignments)])
    _write_csv(d / "cluster_centroids.csv", ["cluster", "hour", "latent", "value"],
               [(c, h, j, cen[h, j]) for c, cen in enumerate(res.centroids)
                for h in range(cen.shape[0]) for j in range(cen.shape[1])])
    comp = co.component_names
    _write_csv(d / "cluster_severity.csv", ["cluster", "hour", "component", "value"],
               [(c, h, comp[j] if j < len(comp) else j, prof[h, j])
                for c, prof in enumerate(res.severity_profiles) if prof.size
                for h in range(prof.shape[0]) for j in range(prof.shape[1])])
    _write_csv(d / "cluster_km.csv", ["cluster", "time_h", "survival", "at_risk", "events"],
               [(c, t, s, n, e) for c, km in enumerate(res.km_curves)
                for t, s, n, e in zip(km.times, km.survival, km.at_risk, km.events)])
    if cfg.latent_dim == 2:
        _write_phenotype_map(d, trajs, recs, comp, cfg.knn)
    return res


def _write_phenotype_map(d: Path, trajs, recs, comp, k: int) -> None:
    z, c = [], []
    for tr, rec in zip(trajs, recs):
        if rec.severity is None:
            continue
        s, _ = rec.severity.at(tr.anchor_times)
        z.append(tr.anchor_states)
        c.append(s[:, 1:])
    if not z:
        return
    z = np.concatenate(z)
    c = np.concatenate(c)
    lo, hi = z.min(axis=0), z.max(axis=0)
    gx, gy = np.meshgrid(np.linspace(lo[0], hi[0], 25), np.linspace(lo[1], hi[1], 25))
    probes = np.stack([gx.ravel(), gy.ravel()], axis=1)
    pm = phenotype_map(z, c, probes, k=min(k, len(z)))
    _write_csv(d / "phenotype_map.csv", ["z0", "z1", "dominant", "intensity"],
               [(p[0], p[1], comp[1 + dom], inten) for p, dom, inten in zip(probes, pm.dominant, pm.intensity)])


def read_report(out) -> EvalReport:
    return EvalReport.from_text((Path(out) / REPORT).read_text(encoding="utf-8"))


def read_report_json(out) -> dict:
    return json.loads((Path(out) / REPORT_JSON).read_text(encoding="utf-8"))
