"""Severity labels and the time-aware rank contrastive objective.

For anchors ``i != j`` the loss term is the negative log-probability of ``z_j``
against the anchors whose label distance to ``i`` is strictly larger than that
of ``j``, weighted by ``exp(-|t_i - t_j| / kappa2)``::

    L = -(1/|Z|^2) sum_i sum_{j != i} w_ij log( e_ij / (e_ij + sum_{k in S_ij} e_ik) )

with ``e_ik = exp(-||z_i - z_k|| / kappa1)`` and
``S_ij = {k != i : d(i, k) > d(i, j)}``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class SeveritySeries:
    """Hourly severity vectors and their trends.

    ``s`` has shape ``(H, C)``; column 0 is the overall score and the remaining
    columns are components.
    """

    hours: np.ndarray
    s: np.ndarray
    v: np.ndarray

    def at(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Labels at (possibly fractional) times by nearest-hour lookup."""
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.hours, np.floor(t + 0.5), side="left")
        idx = np.clip(idx, 0, self.hours.size - 1)
        return self.s[idx], self.v[idx]


def severity_trend(s, delta_t: int = 2) -> np.ndarray:
    """Rate of change ``(s[t+dt] - s[t-dt]) / (2 dt)`` on an hourly series.

    Near the ends the difference is one-sided over ``delta_t`` hours; when the
    series is too short for that, the widest available span is used.  Series
    with fewer than two points have zero trend.
    """
    s = np.asarray(s, dtype=np.float64)
    squeeze = s.ndim == 1
    s2 = s.reshape(s.shape[0], -1)
    n = s2.shape[0]
    if delta_t < 1:
        raise ValueError("delta_t must be >= 1")
    v = np.zeros_like(s2)
    if n < 2:
        return v[:, 0] if squeeze else v
    dt = int(delta_t)
    for t in range(n):
        if t - dt >= 0 and t + dt <= n - 1:
            lo, hi = t - dt, t + dt
        elif t + dt <= n - 1:
            lo, hi = t, t + dt
        elif t - dt >= 0:
            lo, hi = t - dt, t
        else:
            lo, hi = max(t - dt, 0), min(t + dt, n - 1)
        v[t] = (s2[hi] - s2[lo]) / (hi - lo)
    return v[:, 0] if squeeze else v


def label_distance(s_a, v_a, s_b, v_b, delta: float = 20.0) -> float:
    return float(np.abs(np.asarray(s_a) - s_b).sum() + delta * np.abs(np.asarray(v_a) - v_b).sum())


def label_distance_matrix(s: np.ndarray, v: np.ndarray, delta: float = 20.0) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64).reshape(len(s), -1)
    v = np.asarray(v, dtype=np.float64).reshape(len(v), -1)
    ds = np.abs(s[:, None, :] - s[None, :, :]).sum(-1)
    dv = np.abs(v[:, None, :] - v[None, :, :]).sum(-1)
    return ds + delta * dv


def time_mask(t_i, t_j, kappa2: float = 30.0):
    if kappa2 <= 0:
        raise ValueError("kappa2 must be positive")
    return np.exp(-np.abs(np.asarray(t_i, dtype=np.float64) - t_j) / kappa2)


def _harder_sum(e: Tensor, dist: np.ndarray) -> Tensor:
    """``out[i, j] = sum_k e[i, k] * [dist[i, k] > dist[i, j]]`` via per-row sorting."""
    n = dist.shape[0]
    order = np.argsort(dist, axis=1, kind="stable")
    dsorted = np.take_along_axis(dist, order, axis=1)
    # dense integer ranks per row keep ties exact; row offsets then let one
    # searchsorted serve every row
    rank_sorted = np.concatenate(
        [np.zeros((n, 1), dtype=np.int64), np.cumsum(np.diff(dsorted, axis=1) > 0, axis=1)], axis=1
    )
    rank = np.empty_like(rank_sorted)
    np.put_along_axis(rank, order, rank_sorted, axis=1)
    offs = (np.arange(n, dtype=np.int64) * (n + 1))[:, None]
    flat = (rank_sorted + offs).ravel()
    q = (rank + offs).ravel()
    right = (np.searchsorted(flat, q, side="right") - np.arange(n).repeat(n) * n).reshape(n, n)
    left = (np.searchsorted(flat, q, side="left") - np.arange(n).repeat(n) * n).reshape(n, n)

    ed = np.take_along_axis(e.data, order, axis=1)
    suffix = np.concatenate([np.cumsum(ed[:, ::-1], axis=1)[:, ::-1], np.zeros((n, 1))], axis=1)
    out = np.take_along_axis(suffix, right, axis=1)

    def bw(g):
        # grad e[i, k] = sum_j g[i, j] * [dist[i, j] < dist[i, k]]
        gs = np.take_along_axis(g, order, axis=1)
        prefix = np.concatenate([np.zeros((n, 1)), np.cumsum(gs, axis=1)], axis=1)
        return (np.take_along_axis(prefix, left, axis=1),)

    return T.custom_op("harder_sum", out, (e,), bw)


def tacl_loss(
    z: Tensor,
    times,
    s,
    v,
    kappa1: float = 2.0,
    kappa2: float = 30.0,
    delta: float = 20.0,
    use_time_mask: bool = True,
) -> Tensor:
    """Time-aware rank contrastive loss over anchor states ``z`` of shape ``(|Z|, d_z)``.

    Similarity is negative Euclidean distance.  With ``use_time_mask=False``
    every pair has weight 1 (plain rank contrast).
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    n = z.shape[0]
    if n < 2:
        warnings.warn("contrastive loss needs at least two anchors; returning 0", stacklevel=2)
        return Tensor(0.0)
    times = np.asarray(times, dtype=np.float64)
    dist = label_distance_matrix(s, v, delta)
    offdiag = 1.0 - np.eye(n)
    if use_time_mask:
        w = time_mask(times[:, None], times[None, :], kappa2) * offdiag
    else:
        w = offdiag

    logits = T.scale(T.pairwise_distance(z), -1.0 / kappa1)
    masked = np.where(offdiag > 0, logits.data, -np.inf)
    shift = masked.max(axis=1, keepdims=True)     # row max over k != i, constant
    a = T.mul(T.sub(logits, shift), offdiag)        # diagonal pinned to 0 before exp
    e = T.mul(T.exp(a), offdiag)
    denom = T.add(_harder_sum(e, dist), e)
    # self-pairs carry no weight; a unit diagonal keeps log() finite there
    denom = T.add(T.mul(denom, offdiag), np.eye(n))
    terms = T.sub(T.log(denom), a)
    return T.scale(T.reduce_sum(T.mul(terms, w)), 1.0 / (n * n))


def total_loss(l_surv, l_tacl, alpha: float = 1.0):
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if isinstance(l_surv, Tensor) or isinstance(l_tacl, Tensor):
        return T.add(l_surv, T.scale(l_tacl, alpha))
    return l_surv + alpha * l_tacl
