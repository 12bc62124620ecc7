"""Censoring-aware evaluation metrics.

IPCW weights come from the Kaplan-Meier estimate of the censoring
distribution ``G`` fitted on the training labels.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .errors import UndefinedMetricError, UsageError


@dataclass
class KMCurve:
    """Product-limit survival curve, a right-continuous step function."""

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def __call__(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="right")
        return np.concatenate([[1.0], self.survival])[idx]

    def left(self, t) -> np.ndarray:
        """Left limit ``S(t-)``."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="left")
        return np.concatenate([[1.0], self.survival])[idx]


def kaplan_meier(times, events) -> KMCurve:
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    if times.size == 0:
        raise UsageError("Kaplan-Meier needs at least one subject")
    uniq = np.unique(times[events])
    sorted_t = np.sort(times)
    at_risk = times.size - np.searchsorted(sorted_t, uniq, side="left")
    ev_sorted = np.sort(times[events])
    d = np.searchsorted(ev_sorted, uniq, side="right") - np.searchsorted(ev_sorted, uniq, side="left")
    surv = np.cumprod(1.0 - d / at_risk)
    return KMCurve(uniq, surv, at_risk.astype(np.int64), d.astype(np.int64))


def censoring_km(times, events) -> KMCurve:
    """Kaplan-Meier estimate of the censoring distribution (indicator flipped)."""
    return kaplan_meier(times, 1 - np.asarray(events).astype(np.int64))


def c_index_ipcw(risks, train_times, train_events, test_times, test_events, tau=None) -> float:
    """Uno's truncated concordance index.

    Comparable pairs have ``i`` with an event, ``T_i < T_j`` and ``T_i <= tau``;
    each is weighted by ``1 / G(T_i)^2``.  Tied risks count one half.
    """
    r = np.asarray(risks, dtype=np.float64)
    t = np.asarray(test_times, dtype=np.float64)
    e = np.asarray(test_events).astype(bool)
    g = censoring_km(train_times, train_events)
    tau = np.inf if tau is None else float(tau)
    case = e & (t <= tau)
    gi = g(t[case])
    if np.any(gi <= 0):
        raise UndefinedMetricError("censoring survival is zero at an event time")
    w = 1.0 / gi**2
    tc, rc = t[case], r[case]
    comparable = tc[:, None] < t[None, :]
    conc = (rc[:, None] > r[None, :]) + 0.5 * (rc[:, None] == r[None, :])
    den = (w[:, None] * comparable).sum()
    if den <= 0:
        raise UndefinedMetricError("no comparable pairs")
    return float((w[:, None] * comparable * conc).sum() / den)


def brier_score(surv_probs, test_times, test_events, t, censoring: KMCurve) -> float:
    """IPCW Brier score at horizon ``t``.

    ``surv_probs`` are predicted ``S_i(t)``; ``censoring`` is ``G`` fitted on the
    training split.
    """
    s = np.asarray(surv_probs, dtype=np.float64)
    times = np.asarray(test_times, dtype=np.float64)
    ev = np.asarray(test_events).astype(bool)
    died = (times <= t) & ev
    alive = times > t
    g_t = float(censoring(t))
    g_before = censoring.left(times[died])
    if (alive.any() and g_t <= 0) or np.any(g_before <= 0):
        raise UndefinedMetricError("censoring survival is zero where a weight is needed")
    total = np.sum(s[died] ** 2 / g_before)
    if alive.any():
        total += np.sum((1.0 - s[alive]) ** 2) / g_t
    return float(total / times.size)


def dynamic_auc(risks, train_times, train_events, test_times, test_events, t) -> float:
    """Cumulative/dynamic AUC at ``t`` with IPCW-weighted cases."""
    r = np.asarray(risks, dtype=np.float64)
    times = np.asarray(test_times, dtype=np.float64)
    ev = np.asarray(test_events).astype(bool)
    cases = (times <= t) & ev
    controls = times > t
    if not cases.any() or not controls.any():
        raise UndefinedMetricError(f"no cases or no controls at t={t}")
    g = censoring_km(train_times, train_events)
    gi = g(times[cases])
    if np.any(gi <= 0):
        raise UndefinedMetricError("censoring survival is zero at a case time")
    w = 1.0 / gi
    rc, rn = r[cases], r[controls]
    score = (rc[:, None] > rn[None, :]) + 0.5 * (rc[:, None] == rn[None, :])
    return float((w[:, None] * score).sum() / (w.sum() * rn.size))


def follow_up_quartiles(times) -> np.ndarray:
    return np.percentile(np.asarray(times, dtype=np.float64), [25, 50, 75])


@dataclass
class EvalReport:
    eval_times: list[float]
    c_index_q: list[float]
    brier_q: list[float]
    auc_q: list[float]
    c_index: float = field(init=False)
    brier: float = field(init=False)
    auc: float = field(init=False)

    def __post_init__(self):
        self.c_index = float(np.mean(self.c_index_q))
        self.brier = float(np.mean(self.brier_q))
        self.auc = float(np.mean(self.auc_q))

    def as_flat(self) -> dict[str, float]:
        out: dict[str, float] = {"c_index": self.c_index, "brier": self.brier, "auc": self.auc}
        for q, name in enumerate(("q25", "q50", "q75")):
            out[f"eval_time_{name}"] = self.eval_times[q]
            out[f"c_index_{name}"] = self.c_index_q[q]
            out[f"brier_{name}"] = self.brier_q[q]
            out[f"auc_{name}"] = self.auc_q[q]
        return {k: float(v) for k, v in out.items()}

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in self.as_flat().items())

    def to_json(self) -> str:
        d = {k: np.asarray(v, dtype=np.float64).tolist() for k, v in asdict(self).items()}
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_flat(cls, flat: dict[str, float]) -> "EvalReport":
        qs = ("q25", "q50", "q75")
        return cls(
            eval_times=[float(flat[f"eval_time_{q}"]) for q in qs],
            c_index_q=[float(flat[f"c_index_{q}"]) for q in qs],
            brier_q=[float(flat[f"brier_{q}"]) for q in qs],
            auc_q=[float(flat[f"auc_{q}"]) for q in qs],
        )

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        flat = {}
        for line in text.splitlines():
            if line.strip() and not line.startswith("#"):
                k, v = line.split("=", 1)
                flat[k.strip()] = float(v)
        return cls.from_flat(flat)


def quartile_eval(risks, train_times, train_events, test_times, test_events,
                  surv_fn=None) -> EvalReport:
    """Metrics at the 25/50/75% quantiles of the test follow-up times.

    ``surv_fn(t)`` returns predicted survival probabilities for every test
    patient at ``t``; without it the Brier entries are NaN.  The C-index at each
    quartile is truncated at that quartile time.
    """
    qt = follow_up_quartiles(test_times)
    cq, bq, aq = [], [], []
    g = censoring_km(train_times, train_events)
    for t in qt:
        cq.append(c_index_ipcw(risks, train_times, train_events, test_times, test_events, tau=t))
        aq.append(dynamic_auc(risks, train_times, train_events, test_times, test_events, t))
        if surv_fn is None:
            bq.append(float("nan"))
        else:
            bq.append(brier_score(surv_fn(t), test_times, test_events, t, g))
    return EvalReport([float(x) for x in qt], cq, bq, aq)


def pairwise_upper(x: np.ndarray, metric: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    diff = x[:, None, :] - x[None, :, :]
    if metric == "l2":
        d = np.sqrt((diff**2).sum(-1))
    else:
        d = np.abs(diff).sum(-1)
    iu = np.triu_indices(len(x), k=1)
    return d[iu]


def alignment_spearman(latents, severities) -> float:
    """Spearman correlation between pairwise latent (L2) and label (L1) distances.

    Returns NaN when either distance vector is constant.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.shape[0] < 3:
        raise UsageError("alignment needs at least three patients")
    dz = pairwise_upper(latents, "l2")
    ds = pairwise_upper(severities, "l1")
    if np.ptp(dz) == 0 or np.ptp(ds) == 0:
        return float("nan")
    return float(stats.spearmanr(dz, ds).statistic)


@dataclass
class CalibrationBins:
    edges: np.ndarray
    mean_predicted: np.ndarray
    observed: np.ndarray
    counts: np.ndarray


def calibration_bins(surv_probs, times, events, t, n_bins: int = 10) -> CalibrationBins:
    """Bucket patients by predicted ``S(t)`` into equal-width bins on [0, 1].

    Observed survival per bin is the Kaplan-Meier value at ``t`` among the
    bin's members.  Empty bins are NaN.
    """
    if n_bins < 1:
        raise UsageError("n_bins must be >= 1")
    p = np.asarray(surv_probs, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    which = np.clip(np.searchsorted(edges, p, side="right") - 1, 0, n_bins - 1)
    mean_pred = np.full(n_bins, np.nan)
    observed = np.full(n_bins, np.nan)
    counts = np.zeros(n_bins, dtype=np.int64)
    for b in range(n_bins):
        m = which == b
        counts[b] = m.sum()
        if counts[b]:
            mean_pred[b] = p[m].mean()
            observed[b] = float(kaplan_meier(times[m], events[m])(t))
    return CalibrationBins(edges, mean_pred, observed, counts)
