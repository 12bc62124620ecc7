"""Neural CDE encoder: control paths to latent trajectories.

The latent state solves ``dz/dt = f_theta(z) dX/dt`` with ``z(0) = g_phi(X(0))``.
Integration is fixed-step (Euler or classical RK4) over a per-patient
schedule that contains the uniform solver grid, the hourly output grid and
every path breakpoint, so states at observation times are exact solver states
and no step straddles a breakpoint.

Patients are integrated together in batches.  Shorter schedules are padded with
zero-length steps, which leave the state unchanged exactly, so a patient's
trajectory does not depend on who else is in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .controlpath import ControlPath
from .errors import ConfigError, NumericDivergence, ShapeError
from .nn import MLP
from .tensor import NumericError, Tensor

# merge schedule points closer than this (hours)
_TIME_TOL = 1e-9


@dataclass
class SolverConfig:
    method: str = "rk4"
    steps_per_hour: int = 2
    grid_per_hour: int = 1

    def __post_init__(self):
        if self.method not in ("rk4", "euler"):
            raise ConfigError(f"solver method must be 'rk4' or 'euler', got {self.method!r}")
        if int(self.steps_per_hour) < 1:
            raise ConfigError("steps_per_hour must be >= 1")
        if int(self.grid_per_hour) < 1:
            raise ConfigError("grid_per_hour must be >= 1")


class EncoderParams:
    """Initial map ``g_phi`` and vector field ``f_theta``.

    ``f_theta`` maps ``R^{d_z}`` to ``R^{d_z * (d+1)}``, read as a
    ``(d_z, d+1)`` matrix whose last column acts on the time channel.
    """

    def __init__(
        self,
        n_features: int,
        latent_dim: int,
        rng: np.random.Generator,
        g_hidden: Sequence[int] = (64,),
        f_hidden: Sequence[int] = (64, 64),
        field_scale: float = 1.0,
    ):
        self.n_features = int(n_features)
        self.latent_dim = int(latent_dim)
        ch = self.n_features + 1
        self.g_phi = MLP([ch, *g_hidden, latent_dim], rng, name="g_phi")
        self.f_theta = MLP(
            [latent_dim, *f_hidden, latent_dim * ch],
            rng,
            out_activation="tanh",
            out_scale=field_scale,
            name="f_theta",
        )

    @property
    def channels(self) -> int:
        return self.n_features + 1

    def parameters(self):
        yield from self.g_phi.parameters()
        yield from self.f_theta.parameters()

    def field(self, z: Tensor) -> Tensor:
        """``f_theta(z)`` flattened, shape ``(B, d_z * (d+1))``."""
        return self.f_theta(z)

    def field_matrix(self, z: np.ndarray) -> np.ndarray:
        """``f_theta(z)`` as numpy matrices of shape ``(B, d_z, d+1)``."""
        z = np.atleast_2d(z)
        flat = self.f_theta.forward_numpy(z)
        return flat.reshape(z.shape[0], self.latent_dim, self.channels)


def apply_field(flat_field: Tensor, dxdt: np.ndarray, latent_dim: int) -> Tensor:
    """Batched matrix-vector product ``f(z) @ dX/dt`` as one tape node."""
    b = flat_field.shape[0]
    ch = dxdt.shape[-1]
    if flat_field.shape[1] != latent_dim * ch or dxdt.shape[0] != b:
        raise ShapeError("apply_field", flat_field.shape, dxdt.shape)
    mat = flat_field.data.reshape(b, latent_dim, ch)
    out = np.einsum("bij,bj->bi", mat, dxdt)

    def bw(g):
        return ((g[:, :, None] * dxdt[:, None, :]).reshape(b, latent_dim * ch),)

    return T.custom_op("apply_field", out, (flat_field,), bw)


def latent_velocity(z, dxdt, params: EncoderParams) -> np.ndarray:
    """Latent velocity ``f_theta(z) @ dX/dt`` for one or many states."""
    z = np.asarray(z, dtype=np.float64)
    dxdt = np.asarray(dxdt, dtype=np.float64)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    dx2 = np.atleast_2d(dxdt)
    if z2.shape[1] != params.latent_dim or dx2.shape[1] != params.channels:
        raise ShapeError("latent_velocity", z.shape, dxdt.shape)
    if dx2.shape[0] != z2.shape[0]:
        raise ShapeError("latent_velocity", z.shape, dxdt.shape)
    mats = params.field_matrix(z2)
    out = np.einsum("bij,bj->bi", mats, dx2)
    return out[0] if single else out


@dataclass
class LatentTrajectory:
    """Dense hourly sampling of one latent trajectory plus its anchor states."""

    grid_times: np.ndarray
    grid_states: np.ndarray
    anchor_times: np.ndarray
    anchor_states: np.ndarray

    @property
    def final_state(self) -> np.ndarray:
        return self.anchor_states[-1]


def build_schedule(path: ControlPath, cfg: SolverConfig) -> np.ndarray:
    """Step times for one path: solver grid, hourly grid and every breakpoint."""
    t_end = path.t_end
    grid = np.unique(np.concatenate([
        np.arange(int(np.floor(t_end * cfg.steps_per_hour + _TIME_TOL)) + 1) / cfg.steps_per_hour,
        np.arange(int(np.floor(t_end * cfg.grid_per_hour + _TIME_TOL)) + 1) / cfg.grid_per_hour,
    ]))
    exact = np.unique(np.concatenate([path.breaks, [0.0, t_end]]))
    pos = np.searchsorted(exact, grid)
    lo = np.abs(grid - exact[np.clip(pos - 1, 0, exact.size - 1)])
    hi = np.abs(grid - exact[np.clip(pos, 0, exact.size - 1)])
    grid = grid[(np.minimum(lo, hi) > _TIME_TOL) & (grid < t_end)]
    return np.unique(np.concatenate([grid, exact]))


def _locate(schedule: np.ndarray, times: np.ndarray) -> np.ndarray:
    idx = np.clip(np.searchsorted(schedule, times), 0, schedule.size - 1)
    # grid times may have been merged into a nearby breakpoint
    alt = np.clip(idx - 1, 0, schedule.size - 1)
    idx = np.where(np.abs(schedule[alt] - times) < np.abs(schedule[idx] - times), alt, idx)
    if np.any(np.abs(schedule[idx] - times) > _TIME_TOL):
        raise AssertionError("requested time missing from the solver schedule")
    return idx


@dataclass
class BatchEncoding:
    """Result of integrating a batch of paths.

    Each patient follows its own step schedule; shorter schedules are padded
    with zero-length steps.  ``states[k]`` is the ``(B, d_z)`` tensor of every
    patient's state after its ``k``-th step.
    """

    schedules: list[np.ndarray]
    states: list[Tensor]
    anchor_index: list[np.ndarray]
    anchor_times: list[np.ndarray]
    grid_per_hour: int
    _stacked: Tensor | None = field(default=None, repr=False)

    @property
    def batch_size(self) -> int:
        return len(self.schedules)

    @property
    def end_index(self) -> np.ndarray:
        return np.array([s.size - 1 for s in self.schedules], dtype=np.intp)

    def stacked(self) -> Tensor:
        if self._stacked is None:
            self._stacked = T.stack(self.states, axis=0)
        return self._stacked

    def final_states(self) -> Tensor:
        return T.take(self.stacked(), (self.end_index, np.arange(self.batch_size)))

    def anchors(self) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """Anchor states of all patients, with owner ids and times."""
        steps = np.concatenate(self.anchor_index)
        owners = np.concatenate(
            [np.full(a.size, b, dtype=np.intp) for b, a in enumerate(self.anchor_index)]
        )
        times = np.concatenate(self.anchor_times)
        return T.take(self.stacked(), (steps, owners)), owners, times

    def trajectories(self) -> list[LatentTrajectory]:
        data = np.stack([s.data for s in self.states], axis=0)
        out = []
        for b, sched in enumerate(self.schedules):
            n_grid = int(np.floor(sched[-1] * self.grid_per_hour + _TIME_TOL)) + 1
            gt = np.arange(n_grid) / self.grid_per_hour
            gi = _locate(sched, gt)
            out.append(
                LatentTrajectory(
                    grid_times=gt,
                    grid_states=data[gi, b].copy(),
                    anchor_times=self.anchor_times[b].copy(),
                    anchor_states=data[self.anchor_index[b], b].copy(),
                )
            )
        return out


def encode_batch(
    paths: Sequence[ControlPath], params: EncoderParams, cfg: SolverConfig | None = None
) -> BatchEncoding:
    """Integrate all paths jointly; gradients reach both ``g_phi`` and ``f_theta``."""
    cfg = cfg or SolverConfig()
    if not paths:
        raise ValueError("encode_batch needs at least one path")
    ch = params.channels
    for p in paths:
        if p.channels != ch:
            raise ShapeError("encode", (p.channels,), (ch,))
    schedules = [build_schedule(p, cfg) for p in paths]
    n_steps = max(s.size for s in schedules) - 1
    bsz = len(paths)
    dx = np.zeros((n_steps, 3, bsz, ch))
    incr = np.zeros((n_steps, bsz, ch))
    hs = np.zeros((n_steps, bsz))
    anchor_index, anchor_times = [], []
    for b, (p, sched) in enumerate(zip(paths, schedules)):
        k = sched.size - 1
        if k > 0:
            dx[:k, :, b, :] = p.step_derivatives(sched[:-1], sched[1:])
            hs[:k, b] = np.diff(sched)
            if cfg.method == "euler":
                incr[:k, b, :] = np.diff(p.value(sched), axis=0)
        anchor_index.append(_locate(sched, p.knot_times))
        anchor_times.append(p.knot_times.copy())

    x0 = np.stack([p.knots[0] for p in paths])
    try:
        z = params.g_phi(Tensor(x0))
    except NumericError as exc:
        raise NumericDivergence(f"initial state is non-finite: {exc}", time=0.0) from exc
    states = [z]
    dz = params.latent_dim
    f = params.field
    for k in range(n_steps):
        h = hs[k][:, None]
        d0, dm, d1 = dx[k, 0], dx[k, 1], dx[k, 2]
        try:
            if cfg.method == "euler":
                # increment form z += f(z) (X(t1) - X(t0)): exact whenever the field is constant
                z = _axpy_rows(z, apply_field(f(z), incr[k], dz), np.ones_like(h))
            else:
                k1 = apply_field(f(z), d0, dz)
                k2 = apply_field(f(_axpy_rows(z, k1, 0.5 * h)), dm, dz)
                k3 = apply_field(f(_axpy_rows(z, k2, 0.5 * h)), dm, dz)
                k4 = apply_field(f(_axpy_rows(z, k3, h)), d1, dz)
                z = _rk4_combine(z, k1, k2, k3, k4, h)
        except NumericError as exc:
            t_fail = min(s[min(k, s.size - 1)] for s in schedules)
            raise NumericDivergence(
                f"latent state diverged at integration step {k} (t>={t_fail:g}): {exc}",
                time=float(t_fail),
            ) from exc
        states.append(z)
    return BatchEncoding(schedules, states, anchor_index, anchor_times, cfg.grid_per_hour)


def _axpy_rows(y: Tensor, x: Tensor, c: np.ndarray) -> Tensor:
    """``y + c * x`` with a per-row step size ``c`` of shape ``(B, 1)``."""
    return T.custom_op("axpy_rows", y.data + c * x.data, (y, x), lambda g: (g, c * g))


def _rk4_combine(z: Tensor, k1: Tensor, k2: Tensor, k3: Tensor, k4: Tensor, h: np.ndarray) -> Tensor:
    c = h / 6.0
    out = z.data + c * (k1.data + 2.0 * k2.data + 2.0 * k3.data + k4.data)

    def bw(g):
        gc = c * g
        return g, gc, 2.0 * gc, 2.0 * gc, gc

    return T.custom_op("rk4_combine", out, (z, k1, k2, k3, k4), bw)


def encode(path: ControlPath, params: EncoderParams, cfg: SolverConfig | None = None) -> LatentTrajectory:
    """Latent trajectory of a single patient (no gradient recording)."""
    with T.no_grad():
        return encode_batch([path], params, cfg).trajectories()[0]


def encode_many(
    paths: Sequence[ControlPath],
    params: EncoderParams,
    cfg: SolverConfig | None = None,
    batch_size: int = 256,
) -> list[LatentTrajectory]:
    out: list[LatentTrajectory] = []
    with T.no_grad():
        for i in range(0, len(paths), batch_size):
            out.extend(encode_batch(paths[i:i + batch_size], params, cfg).trajectories())
    return out
