"""Encoder + risk head bundle, binary checkpoints and the training loop."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .controlpath import ControlPath
from .data import Cohort, PatientRecord
from .errors import ConfigError, NumericDivergence, UndefinedMetricError, UsageError
from .metrics import c_index_ipcw, follow_up_quartiles
from .ncde import EncoderParams, SolverConfig, encode_batch, encode_many
from .nn import AdamW
from .survhead import (
    BaselineHazard,
    RiskHeadParams,
    breslow_baseline,
    risk_score,
    survival_loss,
)
from .tacl import tacl_loss
from .tensor import NumericError, Tensor

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_features: int
    latent_dim: int = 64
    g_hidden: tuple[int, ...] = (64,)
    f_hidden: tuple[int, ...] = (64, 64)
    head_hidden: tuple[int, ...] = (64,)
    field_scale: float = 1.0
    solver: SolverConfig = field(default_factory=SolverConfig)


class SurvivalModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = EncoderParams(
            cfg.n_features, cfg.latent_dim, rng,
            g_hidden=cfg.g_hidden, f_hidden=cfg.f_hidden, field_scale=cfg.field_scale,
        )
        self.head = RiskHeadParams(cfg.latent_dim, rng, hidden=cfg.head_hidden)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.encoder.parameters()) + list(self.head.parameters())

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.named_parameters():
            if state[n].shape != p.data.shape:
                raise ConfigError(f"parameter {n}: shape {state[n].shape} != {p.data.shape}")
            p.data[...] = state[n]

    def forward(self, paths: Sequence[ControlPath]):
        enc = encode_batch(paths, self.encoder, self.cfg.solver)
        return enc, risk_score(enc.final_states(), self.head)

    def predict_risk(self, paths: Sequence[ControlPath], batch_size: int = 256) -> np.ndarray:
        out = []
        with T.no_grad():
            for i in range(0, len(paths), batch_size):
                out.append(self.forward(paths[i:i + batch_size])[1].data)
        return np.concatenate(out) if out else np.zeros(0)

    def trajectories(self, paths: Sequence[ControlPath]):
        return encode_many(paths, self.encoder, self.cfg.solver)


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(model: SurvivalModel, path, config_hash: str) -> bytes:
    """Write ``u64 manifest length | JSON manifest | little-endian f64 payload``."""
    params = model.named_parameters()
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "parameters": [{"name": n, "shape": list(p.data.shape)} for n, p in params],
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(struct.pack("<Q", len(head)))
    buf.write(head)
    for _, p in params:
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    blob = buf.getvalue()
    Path(path).write_bytes(blob)
    return blob


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise ConfigError(f"{path}: truncated checkpoint")
    (n,) = struct.unpack("<Q", blob[:8])
    try:
        manifest = json.loads(blob[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: unreadable checkpoint manifest") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    payload = blob[8 + n:]
    sizes = [int(np.prod(e["shape"], dtype=np.int64)) for e in manifest["parameters"]]
    if len(payload) != 8 * sum(sizes):
        raise ConfigError(f"{path}: payload has {len(payload)} bytes, manifest needs {8 * sum(sizes)}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    state, off = {}, 0
    for e, size in zip(manifest["parameters"], sizes):
        state[e["name"]] = flat[off:off + size].reshape(e["shape"])
        off += size
    return manifest, state


def load_checkpoint(model: SurvivalModel, path, expected_hash: str | None = None) -> dict:
    manifest, state = read_checkpoint(path)
    if expected_hash is not None and manifest["config_hash"] != expected_hash:
        raise ConfigError(
            f"checkpoint was trained with config {manifest['config_hash'][:12]}, "
            f"current config is {expected_hash[:12]}; refusing to evaluate"
        )
    model.load_state(state)
    return manifest


# -- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    patience: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    alpha: float = 1.0
    kappa1: float = 2.0
    kappa2: float = 30.0
    delta: float = 20.0
    use_tacl: bool = True
    use_time_mask: bool = True
    use_ranking_loss: bool = True
    seed: int = 0


@dataclass
class EpochLog:
    epoch: int
    loss: float
    l_pl: float
    l_pr: float
    l_tacl: float
    val_c_index: float
    best: bool

    FIELDS = ("epoch", "loss", "l_pl", "l_pr", "l_tacl", "val_c_index", "best")


@dataclass
class TrainResult:
    history: list[EpochLog]
    best_epoch: int
    best_val_c_index: float
    baseline: BaselineHazard


def stratified_batches(events: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches with events spread evenly, so each batch has one when possible."""
    n = events.size
    n_batches = max(1, -(-n // batch_size))
    ev = rng.permutation(np.flatnonzero(events == 1))
    cen = rng.permutation(np.flatnonzero(events != 1))
    slots: list[list[int]] = [[] for _ in range(n_batches)]
    for k, i in enumerate(ev):
        slots[k % n_batches].append(int(i))
    b = 0
    for i in cen:
        while len(slots[b]) >= batch_size and any(len(s) < batch_size for s in slots):
            b = (b + 1) % n_batches
        slots[b].append(int(i))
        b = (b + 1) % n_batches
    return [np.array(sorted(s), dtype=np.intp) for s in slots if s]


def anchor_labels(records: Sequence[PatientRecord], owners: np.ndarray, times: np.ndarray):
    s = np.empty((owners.size, records[owners[0]].severity.s.shape[1]))
    v = np.empty_like(s)
    for b in np.unique(owners):
        sel = owners == b
        sev = records[b].severity
        if sev is None:
            raise UsageError(f"patient {records[b].id} has no severity labels for contrastive training")
        s[sel], v[sel] = sev.at(times[sel])
    return s, v


def batch_loss(model: SurvivalModel, paths, records, times, events, cfg: TrainConfig):
    enc, risks = model.forward(paths)
    total, l_pl, l_pr = survival_loss(risks, times, events, use_ranking=cfg.use_ranking_loss)
    l_tacl = Tensor(0.0)
    if cfg.use_tacl and cfg.alpha > 0:
        z, owners, at = enc.anchors()
        s, v = anchor_labels(records, owners, at)
        l_tacl = tacl_loss(z, at, s, v, cfg.kappa1, cfg.kappa2, cfg.delta, cfg.use_time_mask)
        total = T.add(total, T.scale(l_tacl, cfg.alpha))
    return total, l_pl, l_pr, l_tacl


def validation_c_index(risks, train_t, train_e, val_t, val_e) -> float:
    """Mean of the truncated IPCW C-index at the validation follow-up quartiles."""
    vals = []
    for q in follow_up_quartiles(val_t):
        try:
            vals.append(c_index_ipcw(risks, train_t, train_e, val_t, val_e, tau=q))
        except UndefinedMetricError:
            pass
    return float(np.mean(vals)) if vals else float("nan")


def train(
    model: SurvivalModel,
    cohort: Cohort,
    paths: Sequence[ControlPath],
    cfg: TrainConfig,
    log_path=None,
    progress=None,
) -> TrainResult:
    """Mini-batch AdamW on ``L_surv + alpha * L_tacl`` with early stopping.

    The parameters with the best mean-quartile validation C-index are restored
    at the end, and the Breslow baseline is fitted on the training split.
    """
    tr, va = cohort.indices("train"), cohort.indices("val")
    if tr.size == 0:
        raise UsageError("training split is empty")
    train_t, train_e = cohort.labels(tr)
    val_t, val_e = cohort.labels(va)
    train_paths = [paths[i] for i in tr]
    val_paths = [paths[i] for i in va]
    train_recs = cohort.subset(tr)

    rng = np.random.default_rng([cfg.seed, 1])
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    best_state, best_c, best_epoch, stale = model.state(), -np.inf, 0, 0
    history: list[EpochLog] = []
    log_fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(log_fh)
        writer.writerow(EpochLog.FIELDS)
    try:
        for epoch in range(1, cfg.epochs + 1):
            sums = np.zeros(4)
            batches = stratified_batches(train_e, cfg.batch_size, rng)
            for b, idx in enumerate(batches):
                opt.zero_grad()
                try:
                    loss, l_pl, l_pr, l_tacl = batch_loss(
                        model, [train_paths[i] for i in idx], [train_recs[i] for i in idx],
                        train_t[idx], train_e[idx], cfg,
                    )
                    T.backward(loss)
                except (NumericError, NumericDivergence) as exc:
                    T.get_tape().clear()
                    raise NumericDivergence(
                        f"training diverged at epoch {epoch}, batch {b}: {exc}",
                        time=getattr(exc, "time", None),
                    ) from exc
                opt.step()
                sums += np.array([loss.data, l_pl.data, l_pr.data, l_tacl.data]) * idx.size
            sums /= tr.size
            if va.size:
                val_c = validation_c_index(model.predict_risk(val_paths), train_t, train_e, val_t, val_e)
            else:
                val_c = float("nan")
            improved = bool(np.isfinite(val_c) and val_c > best_c) or (epoch == 1 and not np.isfinite(val_c))
            if improved:
                best_state, best_c, best_epoch, stale = model.state(), val_c, epoch, 0
            else:
                stale += 1
            rec = EpochLog(epoch, *map(float, sums), val_c, improved)
            history.append(rec)
            if log_fh is not None:
                writer.writerow([rec.epoch, *(repr(getattr(rec, k)) for k in EpochLog.FIELDS[1:6]), int(rec.best)])
                log_fh.flush()
            if progress is not None:
                progress(rec)
            if stale >= cfg.patience:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    model.load_state(best_state)
    baseline = breslow_baseline(model.predict_risk(train_paths), train_t, train_e)
    return TrainResult(history, best_epoch, float(best_c), baseline)


def config_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
