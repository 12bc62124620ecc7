"""Continuous control paths built from irregular observations.

A path ``X(t)`` augments each observation ``x_j`` with its time stamp, so
``X(t_j) = (x_j, t_j)``.  Two interpolation schemes are available:

``cubic_hermite_backward``
    Piecewise cubic Hermite spline whose slope at knot ``j`` is the backward
    difference ``(X_j - X_{j-1}) / (t_j - t_{j-1})``.  The first knot reuses
    the slope of the first segment, so the first segment is linear.  The path
    on ``[0, t_j]`` depends only on knots ``0..j``.

``rectilinear``
    Each gap ``[t_j, t_{j+1}]`` is split at its midpoint: the first leg advances
    the time channel while holding features at ``x_j``; the second leg moves
    the features to ``x_{j+1}`` with time held at ``t_{j+1}``.

Both schemes are stored as piecewise cubics over a sorted list of breakpoints.
Derivatives at breakpoints are one-sided from the right (from the left at the
final point).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import ConfigError, RangeError, ValidationError

if TYPE_CHECKING:
    from .data import FeatureStats

SCHEMES = ("cubic_hermite_backward", "rectilinear")


@dataclass
class ObservationSeq:
    """Irregular observations of one patient.

    ``values`` has shape ``(n, d)``; missing entries are NaN.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values.reshape(-1, 1)
        if self.values.shape[0] != self.times.shape[0]:
            raise ValidationError(
                f"{self.times.shape[0]} times but {self.values.shape[0]} value rows"
            )
        if self.times.size == 0:
            raise ValidationError("an observation sequence needs at least one time point")
        if self.times[0] != 0.0:
            raise ValidationError(f"first observation time must be 0, got {self.times[0]}")
        if np.any(np.diff(self.times) <= 0):
            raise ValidationError("observation times must be strictly increasing")

    @property
    def n_obs(self) -> int:
        return self.times.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    @property
    def mask(self) -> np.ndarray:
        """True where a value was observed."""
        return ~np.isnan(self.values)

    @property
    def t_last(self) -> float:
        return float(self.times[-1])

    def is_complete(self) -> bool:
        return not np.isnan(self.values).any()


def impute(seq: ObservationSeq, train_stats: FeatureStats) -> ObservationSeq:
    """Forward-fill each feature; gaps before the first observation get the training mean.

    After standardization with the same statistics those leading entries are
    exactly 0.
    """
    mean = np.asarray(train_stats.mean, dtype=np.float64)
    if mean.shape != (seq.n_features,):
        raise ConfigError(
            f"statistics cover {mean.shape[0]} features, sequence has {seq.n_features}"
        )
    if np.isnan(mean).any():
        missing = np.flatnonzero(np.isnan(mean)).tolist()
        raise ConfigError(f"features {missing} are never observed in the training data")
    vals = seq.values.copy()
    n = vals.shape[0]
    observed = ~np.isnan(vals)
    # index of the latest observed row at or before each row
    idx = np.where(observed, np.arange(n)[:, None], -1)
    np.maximum.accumulate(idx, axis=0, out=idx)
    cols = np.broadcast_to(np.arange(vals.shape[1]), vals.shape)
    filled = vals[np.maximum(idx, 0), cols]
    filled = np.where(idx >= 0, filled, mean[None, :])
    return ObservationSeq(seq.times.copy(), filled)


class ControlPath:
    """Piecewise-cubic interpolant of an augmented observation sequence."""

    def __init__(self, breaks: np.ndarray, coeffs: np.ndarray, knots: np.ndarray,
                 knot_times: np.ndarray, scheme: str):
        self.breaks = breaks          # (m+1,) piece boundaries
        self.coeffs = coeffs          # (m, 4, d+1): a + b s + c s^2 + e s^3, s = t - breaks[i]
        self.knots = knots            # (n, d+1)
        self.knot_times = knot_times  # (n,)
        self.scheme = scheme

    @property
    def channels(self) -> int:
        return self.knots.shape[1]

    @property
    def t_end(self) -> float:
        return float(self.knot_times[-1])

    @property
    def n_pieces(self) -> int:
        return self.coeffs.shape[0]

    def _check(self, t: np.ndarray) -> None:
        if np.any(t < 0.0) or np.any(t > self.t_end):
            bad = t[(t < 0.0) | (t > self.t_end)]
            raise RangeError(
                f"t={bad.ravel()[0]!r} outside path domain [0, {self.t_end}]"
            )

    def piece_index(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if self.n_pieces == 0:
            return np.zeros(t.shape, dtype=np.intp)
        idx = np.searchsorted(self.breaks, t, side="right") - 1
        return np.clip(idx, 0, self.n_pieces - 1)

    def _poly(self, t: np.ndarray, idx: np.ndarray, deriv: bool) -> np.ndarray:
        if self.n_pieces == 0:
            shape = t.shape + (self.channels,)
            if deriv:
                return np.zeros(shape)
            return np.broadcast_to(self.knots[0], shape).copy()
        c = self.coeffs[idx]                      # (..., 4, d+1)
        s = (t - self.breaks[idx])[..., None]
        if deriv:
            return c[..., 1, :] + s * (2.0 * c[..., 2, :] + 3.0 * s * c[..., 3, :])
        return c[..., 0, :] + s * (c[..., 1, :] + s * (c[..., 2, :] + s * c[..., 3, :]))

    def value(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        self._check(t)
        out = self._poly(t, self.piece_index(t), deriv=False)
        # the last knot has no piece to its right; return it exactly
        return np.where((t == self.t_end)[..., None], self.knots[-1], out)

    def derivative(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        self._check(t)
        return self._poly(t, self.piece_index(t), deriv=True)

    def evaluate(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(X(t), dX/dt(t))``."""
        t = np.asarray(t, dtype=np.float64)
        self._check(t)
        idx = self.piece_index(t)
        val = self._poly(t, idx, deriv=False)
        val = np.where((t == self.t_end)[..., None], self.knots[-1], val)
        return val, self._poly(t, idx, deriv=True)

    def step_derivatives(self, t0: np.ndarray, t1: np.ndarray) -> np.ndarray:
        """dX/dt at ``t0``, the midpoint and ``t1`` of each step.

        Every step must lie inside a single piece; the piece is located from the
        step midpoint, so the end point uses the left-hand limit.  Returns an
        array of shape ``(len(t0), 3, d+1)``.
        """
        t0 = np.asarray(t0, dtype=np.float64)
        t1 = np.asarray(t1, dtype=np.float64)
        mid = 0.5 * (t0 + t1)
        self._check(t0)
        self._check(t1)
        idx = self.piece_index(mid)
        pts = np.stack([t0, mid, t1], axis=-1)
        return self._poly(pts, np.broadcast_to(idx[:, None], pts.shape), deriv=True)

    def __call__(self, t):
        return self.evaluate(t)


def _hermite_coeffs(p0, p1, m0, m1, dt):
    slope = (p1 - p0) / dt
    c = (3.0 * slope - 2.0 * m0 - m1) / dt
    e = (m0 + m1 - 2.0 * slope) / (dt * dt)
    return np.stack([p0, m0, c, e], axis=1)


def build_path(seq: ObservationSeq, scheme: str = "cubic_hermite_backward") -> ControlPath:
    """Interpolate a fully observed sequence into a :class:`ControlPath`."""
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown interpolation scheme {scheme!r}; choose from {SCHEMES}")
    times = np.asarray(seq.times, dtype=np.float64)
    if np.any(np.diff(times) <= 0):
        raise ValidationError("observation times must be strictly increasing")
    if np.isnan(seq.values).any():
        raise ValidationError("build_path needs a fully observed sequence; impute first")
    knots = np.concatenate([seq.values, times[:, None]], axis=1)
    n, ch = knots.shape
    if n == 1:
        return ControlPath(times.copy(), np.zeros((0, 4, ch)), knots, times.copy(), scheme)

    dt = np.diff(times)[:, None]
    if scheme == "cubic_hermite_backward":
        seg_slope = np.diff(knots, axis=0) / dt        # slope of segment j -> j+1
        slopes = np.vstack([seg_slope[:1], seg_slope])  # knot j uses segment ending at j
        coeffs = _hermite_coeffs(knots[:-1], knots[1:], slopes[:-1], slopes[1:], dt)
        return ControlPath(times.copy(), coeffs, knots, times.copy(), scheme)

    # rectilinear: knot_j -> (x_j, t_{j+1}) at the gap midpoint -> knot_{j+1}
    mids = 0.5 * (times[:-1] + times[1:])
    nodes = np.empty((2 * n - 1, ch))
    nodes[0::2] = knots
    nodes[1::2, :-1] = knots[:-1, :-1]
    nodes[1::2, -1] = times[1:]
    breaks = np.empty(2 * n - 1)
    breaks[0::2] = times
    breaks[1::2] = mids
    h = np.diff(breaks)[:, None]
    coeffs = np.zeros((2 * n - 2, 4, ch))
    coeffs[:, 0] = nodes[:-1]
    coeffs[:, 1] = np.diff(nodes, axis=0) / h
    return ControlPath(breaks, coeffs, knots, times.copy(), scheme)
