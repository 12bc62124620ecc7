"""Interpretation: average vector field analysis and latent trajectory clustering."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from .errors import UsageError
from .metrics import KMCurve, kaplan_meier
from .ncde import EncoderParams, LatentTrajectory


# -- vector field -------------------------------------------------------------


@dataclass
class AvgField:
    """Mean of ``f_theta(z)`` over sampled latent states, shape ``(d_z, d+1)``.

    The last column belongs to the time channel.
    """

    matrix: np.ndarray
    sample_count: int
    samples: np.ndarray = field(repr=False)   # (n, 2) rows of (patient, grid index)

    @property
    def feature_columns(self) -> np.ndarray:
        return self.matrix[:, :-1]

    @property
    def time_column_norm(self) -> float:
        return float(np.linalg.norm(self.matrix[:, -1]))


def average_field(
    params: EncoderParams,
    trajectories: Sequence[LatentTrajectory],
    n_samples: int = 2048,
    batch_size: int = 64,
    seed: int = 0,
) -> AvgField:
    """Average the vector field over random (patient, grid time) states."""
    if len(trajectories) == 0:
        raise UsageError("average_field needs a non-empty cohort")
    if n_samples < 1:
        raise UsageError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    lengths = np.array([tr.grid_states.shape[0] for tr in trajectories])
    pids = rng.integers(0, len(trajectories), size=n_samples)
    steps = np.floor(rng.random(n_samples) * lengths[pids]).astype(np.intp)
    total = np.zeros((params.latent_dim, params.channels))
    for lo in range(0, n_samples, batch_size):
        sl = slice(lo, lo + batch_size)
        z = np.stack([trajectories[p].grid_states[k] for p, k in zip(pids[sl], steps[sl])])
        total += params.field_matrix(z).sum(axis=0)
    return AvgField(total / n_samples, n_samples, np.stack([pids, steps], axis=1))


def field_from_states(params: EncoderParams, states: np.ndarray) -> AvgField:
    states = np.atleast_2d(states)
    mats = params.field_matrix(states)
    return AvgField(mats.mean(axis=0), states.shape[0], np.zeros((0, 2), dtype=np.intp))


def feature_importance(fld: AvgField, names: Sequence[str] | None = None) -> list[tuple[str, float]]:
    """Column L2 norms of the feature columns, largest first (ties by index)."""
    cols = fld.feature_columns
    scores = np.linalg.norm(cols, axis=0)
    names = list(names) if names is not None else [f"x{k}" for k in range(cols.shape[1])]
    order = sorted(range(len(scores)), key=lambda k: (-scores[k], k))
    return [(names[k], float(scores[k])) for k in order]


def feature_relevance(fld: AvgField) -> np.ndarray:
    """Cosine similarity between feature columns; zero-norm columns relate as 0."""
    cols = fld.feature_columns
    norms = np.linalg.norm(cols, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    unit = cols / safe
    rel = unit.T @ unit
    zero = norms == 0
    rel[zero, :] = 0.0
    rel[:, zero] = 0.0
    rel = 0.5 * (rel + rel.T)
    np.fill_diagonal(rel, np.where(zero, 0.0, 1.0))
    return np.clip(rel, -1.0, 1.0)


# -- dynamic time warping -----------------------------------------------------


@numba.njit(cache=True)
def _dtw_matrix(a, b):
    n, m = a.shape[0], b.shape[0]
    acc = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(a.shape[1]):
                d = a[i, k] - b[j, k]
                s += d * d
            c = np.sqrt(s)
            if i == 0 and j == 0:
                acc[i, j] = c
            elif i == 0:
                acc[i, j] = c + acc[i, j - 1]
            elif j == 0:
                acc[i, j] = c + acc[i - 1, j]
            else:
                best = acc[i - 1, j - 1]
                if acc[i - 1, j] < best:
                    best = acc[i - 1, j]
                if acc[i, j - 1] < best:
                    best = acc[i, j - 1]
                acc[i, j] = c + best
    return acc


@numba.njit(cache=True)
def _backtrack(acc):
    i, j = acc.shape[0] - 1, acc.shape[1] - 1
    path = np.empty((acc.shape[0] + acc.shape[1], 2), dtype=np.int64)
    n = 0
    while True:
        path[n, 0] = i
        path[n, 1] = j
        n += 1
        if i == 0 and j == 0:
            break
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            diag = acc[i - 1, j - 1]
            up = acc[i - 1, j]
            left = acc[i, j - 1]
            if diag <= up and diag <= left:
                i -= 1
                j -= 1
            elif up <= left:
                i -= 1
            else:
                j -= 1
    return path[:n][::-1]


@numba.njit(cache=True)
def _dtw_many(seqs_flat, offsets, others_flat, other_offsets):
    out = np.empty((offsets.shape[0] - 1, other_offsets.shape[0] - 1))
    for p in range(offsets.shape[0] - 1):
        a = seqs_flat[offsets[p]:offsets[p + 1]]
        for q in range(other_offsets.shape[0] - 1):
            b = others_flat[other_offsets[q]:other_offsets[q + 1]]
            acc = _dtw_matrix(a, b)
            out[p, q] = acc[-1, -1]
    return out


def _as_seq(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[0] == 0:
        raise UsageError("DTW needs non-empty sequences")
    return np.ascontiguousarray(a)


def dtw_distance(a, b) -> float:
    """Accumulated L2 cost ``D(n, m)`` of the optimal warping path."""
    return float(_dtw_matrix(_as_seq(a), _as_seq(b))[-1, -1])


def dtw_path(a, b) -> tuple[float, np.ndarray]:
    acc = _dtw_matrix(_as_seq(a), _as_seq(b))
    return float(acc[-1, -1]), _backtrack(acc)


def _pack(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    seqs = [_as_seq(s) for s in seqs]
    offsets = np.concatenate([[0], np.cumsum([s.shape[0] for s in seqs])]).astype(np.int64)
    return np.ascontiguousarray(np.concatenate(seqs, axis=0)), offsets


def dtw_cross(seqs_a: Sequence[np.ndarray], seqs_b: Sequence[np.ndarray]) -> np.ndarray:
    """DTW distance between every sequence in ``seqs_a`` and every one in ``seqs_b``."""
    fa, oa = _pack(seqs_a)
    fb, ob = _pack(seqs_b)
    return _dtw_many(fa, oa, fb, ob)


def dtw_matrix(seqs: Sequence[np.ndarray]) -> np.ndarray:
    d = dtw_cross(seqs, seqs)
    return 0.5 * (d + d.T)


def _dba_cost(seqs, centroid) -> float:
    return float(dtw_cross(seqs, [centroid]).sum())


def dba_centroid(sequences: Sequence[np.ndarray], init: np.ndarray | None = None,
                 iters: int = 10) -> np.ndarray:
    """DTW barycenter averaging.

    Starts from the medoid unless ``init`` is given.  Each iteration aligns every
    sequence to the centroid and replaces each centroid point by the mean of the
    points aligned to it.  An update that would raise the total DTW cost is
    rejected and the iteration stops, so the cost never increases.
    """
    seqs = [_as_seq(s) for s in sequences]
    if not seqs:
        raise UsageError("DBA needs at least one sequence")
    if init is None:
        if len(seqs) == 1:
            return seqs[0].copy()
        init = seqs[int(np.argmin(dtw_matrix(seqs).sum(axis=1)))]
    centroid = _as_seq(init).copy()
    cost = _dba_cost(seqs, centroid)
    for _ in range(iters):
        sums = np.zeros_like(centroid)
        counts = np.zeros(centroid.shape[0])
        for s in seqs:
            _, path = dtw_path(centroid, s)
            np.add.at(sums, path[:, 0], s[path[:, 1]])
            np.add.at(counts, path[:, 0], 1.0)
        new = sums / counts[:, None]
        new_cost = _dba_cost(seqs, new)
        if new_cost > cost:
            break
        converged = np.array_equal(new, centroid)
        centroid, cost = new, new_cost
        if converged:
            break
    return centroid


# -- clustering ---------------------------------------------------------------


@dataclass
class ClusterResult:
    assignments: np.ndarray
    centroids: list[np.ndarray]
    n_clusters: int
    cost: float
    severity_profiles: list[np.ndarray] = field(default_factory=list)
    km_curves: list[KMCurve] = field(default_factory=list)
    names: list[str] = field(default_factory=list)


def _kmedoids(dist: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100):
    n = dist.shape[0]
    # k-medoids++ seeding
    medoids = [int(rng.integers(n))]
    for _ in range(1, k):
        dmin = dist[:, medoids].min(axis=1)
        p = dmin**2
        if p.sum() <= 0:
            rest = np.setdiff1d(np.arange(n), medoids)
            medoids.append(int(rng.choice(rest)))
        else:
            medoids.append(int(rng.choice(n, p=p / p.sum())))
    medoids = np.array(medoids)
    labels = np.argmin(dist[:, medoids], axis=1)
    for _ in range(max_iter):
        new = medoids.copy()
        for c in range(k):
            members = np.flatnonzero(labels == c)
            if members.size:
                new[c] = members[np.argmin(dist[np.ix_(members, members)].sum(axis=1))]
        new_labels = np.argmin(dist[:, new], axis=1)
        if np.array_equal(new, medoids) and np.array_equal(new_labels, labels):
            break
        medoids, labels = new, new_labels
    cost = float(dist[np.arange(n), medoids[labels]].sum())
    return medoids, labels, cost


def cluster_trajectories(
    trajectories: Sequence[np.ndarray],
    n_clusters: int = 4,
    seed: int = 0,
    n_init: int = 10,
    dba_iters: int = 10,
    refine_rounds: int = 5,
) -> ClusterResult:
    """Cluster variable-length latent state sequences under DTW.

    k-medoids on the full DTW distance matrix (best of ``n_init`` seeded
    restarts), then alternating DBA centroid refinement and nearest-centroid
    reassignment while the total cost decreases.
    """
    seqs = [_as_seq(t.grid_states if isinstance(t, LatentTrajectory) else t) for t in trajectories]
    n = len(seqs)
    if n_clusters < 1:
        raise UsageError("n_clusters must be >= 1")
    if n_clusters > n:
        raise UsageError(f"{n_clusters} clusters requested for {n} trajectories")
    dist = dtw_matrix(seqs)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        med, lab, cost = _kmedoids(dist, n_clusters, rng)
        if best is None or cost < best[2]:
            best = (med, lab, cost)
    medoids, labels, cost = best
    centroids = [seqs[m].copy() for m in medoids]
    for _ in range(refine_rounds):
        cand = []
        for c in range(n_clusters):
            members = [seqs[i] for i in np.flatnonzero(labels == c)]
            cand.append(dba_centroid(members, init=centroids[c], iters=dba_iters) if members else centroids[c])
        d = dtw_cross(seqs, cand)
        new_labels = np.argmin(d, axis=1)
        new_cost = float(d[np.arange(n), new_labels].sum())
        if new_cost >= cost - 1e-12:
            break
        centroids, labels, cost = cand, new_labels, new_cost
    return ClusterResult(np.asarray(labels, dtype=np.int64), centroids, n_clusters, cost)


def attach_outcomes(result: ClusterResult, severities: Sequence[np.ndarray],
                    times, events) -> ClusterResult:
    """Add per-cluster mean hourly severity and Kaplan-Meier curves.

    ``severities[i]`` is patient ``i``'s hourly severity over its own window;
    profiles average over members present at each hour.
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events)
    profiles, curves = [], []
    for c in range(result.n_clusters):
        idx = np.flatnonzero(result.assignments == c)
        if idx.size == 0:
            profiles.append(np.zeros(0))
            curves.append(KMCurve(np.zeros(0), np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64)))
            continue
        sev = [np.asarray(severities[i], dtype=np.float64) for i in idx]
        horizon = max(s.shape[0] for s in sev)
        tail = sev[0].shape[1:]
        acc = np.zeros((horizon, *tail))
        cnt = np.zeros(horizon)
        for s in sev:
            acc[: s.shape[0]] += s
            cnt[: s.shape[0]] += 1
        profiles.append(acc / cnt.reshape(-1, *([1] * len(tail))))
        curves.append(kaplan_meier(times[idx], events[idx]))
    result.severity_profiles = profiles
    result.km_curves = curves
    result.names = progression_names(profiles)
    return result


def progression_names(profiles: Sequence[np.ndarray], early_hours: int = 12) -> list[str]:
    """Descriptive labels from initial severity level and early slope.

    With four clusters the two most severe starts become ``ISQI`` (steeper
    improvement) and ``ISK``; the milder pair become ``IMSI`` (steeper
    improvement) and ``IMK``.  Other cluster counts get ``C0, C1, ...``.
    """
    k = len(profiles)
    if k != 4 or any(p.size == 0 for p in profiles):
        return [f"C{c}" for c in range(k)]
    overall = [p if p.ndim == 1 else p[:, 0] for p in profiles]
    start = np.array([o[0] for o in overall])
    slope = np.array([
        (o[min(early_hours, o.size - 1)] - o[0]) / max(min(early_hours, o.size - 1), 1) for o in overall
    ])
    order = np.argsort(-start, kind="stable")
    names = [""] * 4
    severe, mild = order[:2], order[2:]
    s_imp = severe[np.argmin(slope[severe])]
    names[s_imp] = "ISQI"
    names[severe[severe != s_imp][0]] = "ISK"
    m_imp = mild[np.argmin(slope[mild])]
    names[m_imp] = "IMSI"
    names[mild[mild != m_imp][0]] = "IMK"
    return names


# -- phenotype map ------------------------------------------------------------


@dataclass
class PhenotypeMap:
    dominant: np.ndarray
    intensity: np.ndarray
    mean_components: np.ndarray


def phenotype_map(anchor_states, components, probes, k: int = 50) -> PhenotypeMap:
    """Average component scores of the ``k`` nearest anchors to each probe point."""
    z = np.asarray(anchor_states, dtype=np.float64)
    comp = np.asarray(components, dtype=np.float64)
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    if z.shape[0] == 0:
        raise UsageError("phenotype_map needs anchor states")
    if k > z.shape[0]:
        warnings.warn(f"only {z.shape[0]} anchors available; using all of them", stacklevel=2)
        k = z.shape[0]
    d = np.sqrt(((probes[:, None, :] - z[None, :, :]) ** 2).sum(-1))
    nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
    means = comp[nearest].mean(axis=1)
    dom = np.argmax(means, axis=1)
    return PhenotypeMap(dom, means[np.arange(len(dom)), dom], means)
