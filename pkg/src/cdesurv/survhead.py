"""Cox-style risk head, survival losses and the Breslow baseline hazard."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import RangeError, UsageError, ValidationError
from .nn import MLP
from .tensor import Tensor


@dataclass(frozen=True)
class SurvivalLabel:
    time_to_event: float
    event: int

    def __post_init__(self):
        if not self.time_to_event >= 0:
            raise ValidationError(f"time_to_event must be >= 0, got {self.time_to_event}")
        if self.event not in (0, 1):
            raise ValidationError(f"event must be 0 or 1, got {self.event}")


def label_arrays(labels: Sequence[SurvivalLabel]) -> tuple[np.ndarray, np.ndarray]:
    times = np.array([lb.time_to_event for lb in labels], dtype=np.float64)
    events = np.array([lb.event for lb in labels], dtype=np.int64)
    return times, events


class RiskHeadParams:
    """``G_eta``: latent state to scalar log hazard ratio."""

    def __init__(self, latent_dim: int, rng: np.random.Generator, hidden: Sequence[int] = (64,)):
        self.net = MLP([latent_dim, *hidden, 1], rng, name="G_eta")

    def parameters(self):
        yield from self.net.parameters()


def risk_score(z_last: Tensor, params: RiskHeadParams) -> Tensor:
    """Risk ``r = G_eta(z)`` per row of ``z_last``; the hazard ratio is ``exp(r)``."""
    z = z_last if isinstance(z_last, Tensor) else Tensor(np.atleast_2d(z_last))
    return T.reshape(params.net(z), (z.shape[0],))


def _check_batch(risks: Tensor, times: np.ndarray, events: np.ndarray) -> None:
    if times.size == 0:
        raise UsageError("survival losses need a non-empty batch")
    if risks.shape != times.shape or events.shape != times.shape:
        raise UsageError(
            f"risks {risks.shape}, times {times.shape} and events {events.shape} must align"
        )


def risk_set_matrix(times: np.ndarray) -> np.ndarray:
    """``M[i, k] = T_k >= T_i``: row ``i`` is the risk set at patient ``i``'s time."""
    return times[None, :] >= times[:, None]


def partial_likelihood_loss(risks: Tensor, times, events) -> Tensor:
    """Mean negative log Cox partial likelihood over patients with an event.

    Risk sets are formed within the batch.  Batches without events give 0.
    """
    risks = risks if isinstance(risks, Tensor) else Tensor(risks)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    _check_batch(risks, times, events)
    n_ev = int(events.sum())
    if n_ev == 0:
        return Tensor(0.0)
    ev = np.flatnonzero(events)
    mask = risk_set_matrix(times)[ev]                   # (E, B)
    r = risks.data
    shift = np.max(np.where(mask, r[None, :], -np.inf), axis=1)
    rel = T.sub(T.reshape(risks, (1, -1)), shift[:, None])
    # zero out entries outside the risk set before exponentiating
    e = T.mul(T.exp(T.mul(rel, mask)), mask)
    lse = T.add(T.log(T.reduce_sum(e, axis=1)), shift)
    per_event = T.sub(lse, T.take(risks, ev))
    return T.scale(T.reduce_sum(per_event), 1.0 / n_ev)


def ranking_loss(risks: Tensor, times, events, exclude_self: bool = False) -> Tensor:
    """Smoothed pairwise ranking loss ``sum sigma(r_k - r_i)`` over risk sets.

    The risk set of ``i`` contains ``i`` itself, contributing ``sigma(0) = 0.5``
    per event unless ``exclude_self`` is set.
    """
    risks = risks if isinstance(risks, Tensor) else Tensor(risks)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    _check_batch(risks, times, events)
    n_ev = int(events.sum())
    if n_ev == 0:
        return Tensor(0.0)
    ev = np.flatnonzero(events)
    mask = risk_set_matrix(times)[ev].astype(np.float64)
    if exclude_self:
        mask[np.arange(ev.size), ev] = 0.0
    diff = T.sub(T.reshape(risks, (1, -1)), T.reshape(T.take(risks, ev), (-1, 1)))
    s = T.mul(T.sigmoid(diff), mask)
    return T.scale(T.reduce_sum(s), 1.0 / n_ev)


def survival_loss(risks: Tensor, times, events, use_ranking: bool = True,
                  exclude_self: bool = False) -> tuple[Tensor, Tensor, Tensor]:
    """``L_PL + L_PR``; returns ``(total, l_pl, l_pr)``."""
    l_pl = partial_likelihood_loss(risks, times, events)
    if use_ranking:
        l_pr = ranking_loss(risks, times, events, exclude_self=exclude_self)
    else:
        l_pr = Tensor(0.0)
    return T.add(l_pl, l_pr), l_pl, l_pr


@dataclass
class BaselineHazard:
    """Breslow cumulative baseline hazard, a right-continuous step function."""

    event_times: np.ndarray
    cumulative_hazard: np.ndarray

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0):
            raise RangeError("baseline hazard queried at negative time")
        idx = np.searchsorted(self.event_times, t, side="right")
        padded = np.concatenate([[0.0], self.cumulative_hazard])
        return padded[idx]


def breslow_baseline(risks, times, events) -> BaselineHazard:
    """``Lambda_0(t) = sum_{t_e <= t} d_e / sum_{k: T_k >= t_e} exp(r_k)``."""
    r = np.asarray(risks.data if isinstance(risks, Tensor) else risks, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    if not events.any():
        return BaselineHazard(np.zeros(0), np.zeros(0))
    uniq = np.unique(times[events])
    c = r.max()
    w = np.exp(r - c)
    order = np.argsort(times, kind="stable")
    ts, ws = times[order], w[order]
    tail = np.cumsum(ws[::-1])[::-1]                 # sum of w over T_k >= ts[i]
    first = np.searchsorted(ts, uniq, side="left")
    at_risk = tail[first] * np.exp(c)
    d = np.array([np.count_nonzero(times[events] == u) for u in uniq], dtype=np.float64)
    return BaselineHazard(uniq, np.cumsum(d / at_risk))


def predict_survival(r, baseline: BaselineHazard, t) -> np.ndarray:
    """``S(t | r) = exp(-Lambda_0(t) exp(r))``.

    ``r`` and ``t`` broadcast; pass ``r[:, None]`` and a row of times to get a
    patients-by-times matrix.
    """
    lam = baseline(t)
    return np.exp(-lam * np.exp(np.asarray(r, dtype=np.float64)))
