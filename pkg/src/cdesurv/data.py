"""Cohorts: synthetic generation with known ground truth, CSV round trips,
standardization and splits."""

from __future__ import annotations

import csv
import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .controlpath import ControlPath, ObservationSeq, build_path, impute
from .errors import ConfigError, SchemaError, UsageError, ValidationError
from .survhead import SurvivalLabel
from .tacl import SeveritySeries, severity_trend

SPLITS = ("train", "val", "test")
COMPONENT_NAMES = ("overall", "resp", "coag", "liver", "cardio", "neuro", "renal")
FAMILY_NAMES = ("ISQI", "ISK", "IMK", "IMSI")


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), 1e-8)


@dataclass
class PatientRecord:
    id: str
    seq: ObservationSeq
    label: SurvivalLabel
    severity: SeveritySeries | None = None
    risk: float | None = None
    family: int | None = None
    # hourly latent health and its instantaneous rate (synthetic only)
    health: np.ndarray | None = field(default=None, repr=False)
    health_rate: np.ndarray | None = field(default=None, repr=False)


@dataclass
class Cohort:
    records: list[PatientRecord]
    feature_names: list[str]
    component_names: list[str]
    stats: FeatureStats | None = None
    split: np.ndarray | None = None          # "train" / "val" / "test" per record
    standardized: bool = False

    def __len__(self) -> int:
        return len(self.records)

    def indices(self, part: str) -> np.ndarray:
        if self.split is None:
            raise UsageError("cohort has not been split")
        return np.flatnonzero(self.split == part)

    def subset(self, idx) -> list[PatientRecord]:
        return [self.records[i] for i in np.asarray(idx, dtype=np.intp)]

    def labels(self, idx=None) -> tuple[np.ndarray, np.ndarray]:
        recs = self.records if idx is None else self.subset(idx)
        t = np.array([r.label.time_to_event for r in recs], dtype=np.float64)
        e = np.array([r.label.event for r in recs], dtype=np.int64)
        return t, e


# -- synthetic generator ------------------------------------------------------


@dataclass
class GeneratorConfig:
    n_patients: int = 2000
    d_features: int = 12
    window_h: int = 36
    obs_rate: float = 0.086          # per-hour observation probability after hour 0
    missing_frac: float = 0.55
    seed: int = 0
    n_families: int = 0              # 0: continuous population; 4: named progression families
    signal_features: int | None = None  # number of features with nonzero mixing rows
    duplicate_features: tuple[tuple[int, int], ...] = ()  # (a, b): row b copies row a
    beta_scale: float = 3.5
    base_hazard: float = 1.0 / 1200.0    # per hour, at zero health
    discharge_mean_h: float = 200.0
    horizon_h: float = 720.0
    noise_sd: float = 0.3
    drift_amplitude: float = 0.3
    health_substeps: int = 10

    def __post_init__(self):
        if self.n_patients < 1:
            raise ConfigError("n_patients must be >= 1")
        if self.d_features < 1:
            raise ConfigError("d_features must be >= 1")
        if self.window_h < 1:
            raise ConfigError("window_h must be >= 1")
        if not 0.0 < self.obs_rate <= 1.0:
            raise ConfigError(f"obs_rate must be in (0, 1], got {self.obs_rate}")
        if not 0.0 <= self.missing_frac < 1.0:
            raise ConfigError(f"missing_frac must be in [0, 1), got {self.missing_frac}")
        if self.n_families not in (0, 2, 4):
            raise ConfigError("n_families must be 0, 2 or 4")
        if self.signal_features is not None and not 0 <= self.signal_features <= self.d_features:
            raise ConfigError("signal_features must be between 0 and d_features")
        for a, b in self.duplicate_features:
            if not (0 <= a < self.d_features and 0 <= b < self.d_features and a != b):
                raise ConfigError(f"bad duplicate feature pair {(a, b)}")
        if self.base_hazard <= 0 or self.discharge_mean_h <= 0 or self.horizon_h <= 0:
            raise ConfigError("hazard, discharge mean and horizon must be positive")


# diffusion scale and reversion rate of the health target
TARGET_NOISE = 0.35
TARGET_REVERSION = 0.2
TARGET_SMOOTHING = 0.5
# relaxation rate range (per hour) for the continuous population
RELAXATION_RATES = (0.05, 0.3)

# log hazard = beta . h(t_n)
HEALTH_BETA = np.array([1.2, 0.8])

# (start, target, relaxation rate per hour) for each named family
_FAMILIES = {
    "ISQI": ((2.5, 2.5), (-2.0, -2.0), 0.35),
    "ISK": ((2.0, 2.0), (2.6, 2.6), 0.15),
    "IMK": ((0.3, 0.3), (0.3, 0.3), 0.15),
    "IMSI": ((-0.2, -0.2), (-1.0, -1.0), 0.05),
}
_TWO_FAMILIES = ("ISK", "ISQI")
# family members share a template, so their set points wander less
FAMILY_NOISE_SCALE = 0.5


@dataclass
class _CohortConstants:
    mixing: np.ndarray          # (d, 2)
    phases: np.ndarray          # (d,)
    sev_weights: np.ndarray     # (6, 2)
    sev_offsets: np.ndarray     # (6,)


def _cohort_constants(cfg: GeneratorConfig) -> _CohortConstants:
    rng = np.random.default_rng([cfg.seed, 7919])
    d = cfg.d_features
    mixing = rng.normal(size=(d, 2))
    if cfg.signal_features is not None:
        silent = rng.permutation(d)[cfg.signal_features:]
        mixing[silent] = 0.0
    for a, b in cfg.duplicate_features:
        mixing[b] = mixing[a]
    phases = rng.uniform(0.0, 2.0 * np.pi, size=d)
    sev_weights = np.abs(rng.normal(size=(6, 2))) + 0.3
    sev_offsets = rng.normal(-0.5, 0.3, size=6)
    return _CohortConstants(mixing, phases, sev_weights, sev_offsets)


def severity_components(h: np.ndarray, const: _CohortConstants) -> np.ndarray:
    """Six saturating component scores in [0, 4] from health states ``(..., 2)``."""
    arg = h @ const.sev_weights.T + const.sev_offsets
    return np.clip(4.0 / (1.0 + np.exp(-arg)), 0.0, 4.0)


def severity_rate(h: np.ndarray, dh: np.ndarray, const: _CohortConstants) -> np.ndarray:
    """Exact time derivative of the overall severity given ``dh/dt``."""
    arg = h @ const.sev_weights.T + const.sev_offsets
    sig = 1.0 / (1.0 + np.exp(-arg))
    return (4.0 * sig * (1.0 - sig) * (dh @ const.sev_weights.T)).sum(axis=-1)


def _simulate_health(rng, start, target, rate, hours, substeps, noise=TARGET_NOISE):
    """Health relaxes toward a moving target ``m``.

    ``m`` in turn relaxes toward ``q``, a mean-reverting diffusion around the
    patient's set point, so the health path is smooth enough for hourly trends
    to carry the sign of the true rate.  Returns hourly states and the
    instantaneous rates ``rate * (m - h)``.
    """
    dt = 1.0 / substeps
    h = np.array(start, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    m = target.copy()
    q = target.copy()
    hs = np.empty((hours + 1, 2))
    rs = np.empty((hours + 1, 2))
    hs[0], rs[0] = h, rate * (m - h)
    for k in range(1, hours + 1):
        kicks = rng.normal(size=(substeps, 2)) * (noise * math.sqrt(dt))
        for s in range(substeps):
            h = h + dt * rate * (m - h)
            m = m + dt * TARGET_SMOOTHING * (q - m)
            q = q + dt * TARGET_REVERSION * (target - q) + kicks[s]
        hs[k], rs[k] = h, rate * (m - h)
    return hs, rs


def generate_synthetic(cfg: GeneratorConfig | None = None, **overrides) -> Cohort:
    """Draw a cohort whose hazard depends on the latent health at the last observation.

    Every patient is observed at hour 0 and at later whole hours with
    probability ``obs_rate`` up to the window; entries are hidden with
    probability ``missing_frac`` but each row keeps at least one value.  The
    event time after the last observation is exponential with log hazard
    ``beta_scale * HEALTH_BETA . h(t_n)``; it is censored by an exponential
    discharge time and the administrative horizon.
    """
    cfg = dataclasses.replace(cfg or GeneratorConfig(), **overrides)
    const = _cohort_constants(cfg)
    d, window = cfg.d_features, cfg.window_h
    hours = np.arange(window + 1, dtype=np.float64)
    seasonal = cfg.drift_amplitude * np.sin(2 * np.pi * hours[:, None] / 24.0 + const.phases)
    fam_names = FAMILY_NAMES if cfg.n_families == 4 else _TWO_FAMILIES
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_patients)
    records = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        if cfg.n_families:
            family = i % cfg.n_families
            start, target, rate = _FAMILIES[fam_names[family]]
            start = np.asarray(start) + rng.normal(0.0, 0.25, 2)
            target = np.asarray(target) + rng.normal(0.0, 0.25, 2)
            rate = rate * math.exp(rng.normal(0.0, 0.15))
            noise = TARGET_NOISE * FAMILY_NOISE_SCALE
        else:
            family = None
            start = rng.normal(0.0, 1.2, 2)
            target = rng.normal(0.0, 1.0, 2)
            rate = rng.uniform(*RELAXATION_RATES)
            noise = TARGET_NOISE
        h, dh = _simulate_health(rng, start, target, rate, window, cfg.health_substeps, noise)

        observed_hours = np.flatnonzero(np.concatenate([[True], rng.random(window) < cfg.obs_rate]))
        x = h[observed_hours] @ const.mixing.T + seasonal[observed_hours]
        x = x + rng.normal(0.0, cfg.noise_sd, size=x.shape)
        hide = rng.random(x.shape) < cfg.missing_frac
        keep = rng.integers(0, d, size=x.shape[0])
        hide[np.arange(x.shape[0]), keep] = False
        x[hide] = np.nan
        t_n = int(observed_hours[-1])

        risk = float(cfg.beta_scale * HEALTH_BETA @ h[t_n])
        event_t = rng.exponential(1.0 / (cfg.base_hazard * math.exp(risk)))
        discharge = rng.exponential(cfg.discharge_mean_h)
        censor = min(discharge, cfg.horizon_h)
        label = SurvivalLabel(float(min(event_t, censor)), int(event_t <= censor))

        comps = severity_components(h[: t_n + 1], const)
        s = np.concatenate([comps.sum(axis=1, keepdims=True), comps], axis=1)
        sev = SeveritySeries(hours[: t_n + 1].copy(), s, severity_trend(s, 2))
        records.append(PatientRecord(
            id=f"P{i:05d}",
            seq=ObservationSeq(observed_hours.astype(np.float64), x),
            label=label,
            severity=sev,
            risk=risk,
            family=family,
            health=h,
            health_rate=dh,
        ))
    return Cohort(
        records,
        feature_names=[f"f{k:02d}" for k in range(d)],
        component_names=list(COMPONENT_NAMES),
    )


def generator_constants(cfg: GeneratorConfig) -> _CohortConstants:
    return _cohort_constants(cfg)


# -- CSV ----------------------------------------------------------------------


@dataclass
class CsvPaths:
    observations: Path
    labels: Path
    severity: Path | None = None
    truth: Path | None = None

    @classmethod
    def in_dir(cls, directory) -> "CsvPaths":
        d = Path(directory)
        sev = d / "severity.csv"
        truth = d / "truth.csv"
        return cls(d / "observations.csv", d / "labels.csv",
                   sev if sev.exists() else None, truth if truth.exists() else None)


def export_csv(cohort: Cohort, directory) -> CsvPaths:
    """Write observations, labels, severity and (if known) ground truth as CSV."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    out = CsvPaths(d / "observations.csv", d / "labels.csv", d / "severity.csv", d / "truth.csv")
    with open(out.observations, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "time_h", "feature", "value"])
        for r in cohort.records:
            for t, row in zip(r.seq.times, r.seq.values):
                for k in np.flatnonzero(~np.isnan(row)):
                    w.writerow([r.id, repr(float(t)), cohort.feature_names[k], repr(float(row[k]))])
    with open(out.labels, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "time_to_event_h", "event"])
        for r in cohort.records:
            w.writerow([r.id, repr(float(r.label.time_to_event)), r.label.event])
    if all(r.severity is not None for r in cohort.records):
        with open(out.severity, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["patient_id", "hour", *cohort.component_names])
            for r in cohort.records:
                for hr, row in zip(r.severity.hours, r.severity.s):
                    w.writerow([r.id, int(hr), *(repr(float(v)) for v in row)])
    else:
        out.severity = None
    if all(r.risk is not None for r in cohort.records):
        with open(out.truth, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["patient_id", "risk", "family"])
            for r in cohort.records:
                w.writerow([r.id, repr(float(r.risk)), "" if r.family is None else r.family])
    else:
        out.truth = None
    return out


def _read_rows(path: Path, required: Sequence[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"{path.name}: missing columns {missing}")
        yield header
        for line_no, row in enumerate(reader, start=2):
            yield line_no, row


def _float(value: str, where: str) -> float:
    try:
        return float(value)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: cannot parse {value!r} as a number") from exc


def ingest_csv(
    paths: CsvPaths,
    feature_names: Sequence[str],
    min_observed: int = 20,
    window_h: float = 36.0,
) -> Cohort:
    """Read long-format CSVs into a cohort.

    Rows at the same (patient, time) are merged.  Times beyond ``window_h`` are
    dropped, then rows with ``min_observed`` or fewer observed features.  If the
    first surviving row is after hour 0, the patient's clock (and severity
    hours) shift so that it becomes 0.  The time to event is re-anchored to the
    last surviving row.
    """
    feature_names = list(feature_names)
    fidx = {n: k for k, n in enumerate(feature_names)}
    d = len(feature_names)

    obs: dict[str, dict[float, np.ndarray]] = {}
    rows = _read_rows(Path(paths.observations), ["patient_id", "time_h", "feature", "value"])
    next(rows)
    for line_no, row in rows:
        where = f"{Path(paths.observations).name}:{line_no}"
        t = _float(row["time_h"], where)
        if t < 0:
            raise ValidationError(f"{where}: negative time {t}")
        name = row["feature"]
        if name not in fidx:
            raise SchemaError(f"{where}: unknown feature {name!r}")
        per = obs.setdefault(row["patient_id"], {})
        vec = per.get(t)
        if vec is None:
            vec = per[t] = np.full(d, np.nan)
        vec[fidx[name]] = _float(row["value"], where)

    labels: dict[str, SurvivalLabel] = {}
    rows = _read_rows(Path(paths.labels), ["patient_id", "time_to_event_h", "event"])
    next(rows)
    for line_no, row in rows:
        where = f"{Path(paths.labels).name}:{line_no}"
        ev = _float(row["event"], where)
        if ev not in (0.0, 1.0):
            raise ValidationError(f"{where}: event must be 0 or 1")
        labels[row["patient_id"]] = SurvivalLabel(_float(row["time_to_event_h"], where), int(ev))

    severity: dict[str, list[tuple[int, np.ndarray]]] = {}
    comp_names: list[str] = list(COMPONENT_NAMES)
    if paths.severity is not None:
        rows = _read_rows(Path(paths.severity), ["patient_id", "hour"])
        header = next(rows)
        comp_names = [c for c in header if c not in ("patient_id", "hour")]
        for line_no, row in rows:
            where = f"{Path(paths.severity).name}:{line_no}"
            hr = _float(row["hour"], where)
            vals = np.array([_float(row[c], where) for c in comp_names])
            severity.setdefault(row["patient_id"], []).append((int(round(hr)), vals))

    truth: dict[str, tuple[float, int | None]] = {}
    if paths.truth is not None:
        rows = _read_rows(Path(paths.truth), ["patient_id", "risk"])
        next(rows)
        for line_no, row in rows:
            fam = row.get("family", "")
            truth[row["patient_id"]] = (
                _float(row["risk"], f"truth:{line_no}"),
                int(fam) if fam not in ("", None) else None,
            )

    records = []
    for pid, per in obs.items():
        if pid not in labels:
            raise ValidationError(f"patient {pid} has observations but no label")
        times = np.array(sorted(per), dtype=np.float64)
        last_raw = times[-1]
        times = times[times <= window_h]
        kept = [t for t in times if np.count_nonzero(~np.isnan(per[t])) > min_observed]
        if not kept:
            continue
        shift = kept[0]
        t_arr = np.array(kept) - shift
        vals = np.stack([per[t] for t in kept])
        lab = labels[pid]
        gap = last_raw - kept[-1]
        if gap > 0:
            lab = SurvivalLabel(lab.time_to_event + gap, lab.event)
        sev = None
        if pid in severity:
            pairs = sorted(severity[pid], key=lambda p: p[0])
            hrs = np.array([p[0] for p in pairs], dtype=np.float64) - round(shift)
            s = np.stack([p[1] for p in pairs])
            ok = (hrs >= 0) & (hrs <= t_arr[-1] + 1e-9)
            if ok.any():
                sev = SeveritySeries(hrs[ok], s[ok], severity_trend(s[ok], 2))
        risk, fam = truth.get(pid, (None, None))
        records.append(PatientRecord(pid, ObservationSeq(t_arr, vals), lab, sev, risk, fam))
    return Cohort(records, feature_names, comp_names)


# -- preprocessing ------------------------------------------------------------


def split(cohort: Cohort, fracs: Sequence[float] = (0.7, 0.1, 0.2), seed: int = 0) -> Cohort:
    """Assign train/val/test by a seeded shuffle of patients."""
    fracs = np.asarray(fracs, dtype=np.float64)
    if fracs.shape != (3,) or np.any(fracs < 0) or abs(fracs.sum() - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fracs}")
    n = len(cohort)
    n_train = int(round(n * fracs[0]))
    n_val = int(round(n * fracs[1]))
    n_val = min(n_val, n - n_train)
    order = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=object)
    labels[order[:n_train]] = "train"
    labels[order[n_train:n_train + n_val]] = "val"
    labels[order[n_train + n_val:]] = "test"
    return dataclasses.replace(cohort, split=labels.astype(str))


def feature_stats(records: Sequence[PatientRecord]) -> FeatureStats:
    """Per-feature mean and std over all observed entries; never-observed features get NaN mean."""
    vals = np.concatenate([r.seq.values for r in records], axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(vals, axis=0)
        std = np.nanstd(vals, axis=0)
    return FeatureStats(mean, np.where(np.isnan(std), 1.0, std))


def standardize(cohort: Cohort) -> Cohort:
    """z-score every feature with statistics from the training split only."""
    if cohort.standardized:
        return cohort
    train = cohort.indices("train")
    if train.size == 0:
        raise UsageError("cannot standardize: training split is empty")
    stats = feature_stats(cohort.subset(train))
    records = [
        dataclasses.replace(r, seq=ObservationSeq(r.seq.times, (r.seq.values - stats.mean) / stats.std))
        for r in cohort.records
    ]
    return dataclasses.replace(cohort, records=records, stats=stats, standardized=True)


def prepare(cohort: Cohort, fracs=(0.7, 0.1, 0.2), seed: int = 0) -> Cohort:
    return standardize(split(cohort, fracs, seed))


def control_paths(records: Sequence[PatientRecord], scheme: str = "cubic_hermite_backward") -> list[ControlPath]:
    """Forward-filled control paths of standardized records (leading gaps become 0)."""
    out = []
    for r in records:
        zero = FeatureStats(np.zeros(r.seq.n_features), np.ones(r.seq.n_features))
        out.append(build_path(impute(r.seq, zero), scheme))
    return out
