"""Shared builders for model-level tests."""

from __future__ import annotations

import numpy as np

from cdesurv import tensor as T
from cdesurv.data import GeneratorConfig, control_paths, generate_synthetic, prepare
from cdesurv.model import ModelConfig, SurvivalModel, TrainConfig, batch_loss
from cdesurv.ncde import SolverConfig


def micro_instance(seed: int, d: int = 3, dz: int = 4, batch: int = 4, window_h: int = 8):
    """A tiny standardized cohort, its control paths and a small model."""
    gen = GeneratorConfig(n_patients=batch, d_features=d, window_h=window_h, obs_rate=0.4, seed=seed)
    cohort = prepare(generate_synthetic(gen), (1.0, 0.0, 0.0), seed=seed)
    t, e = cohort.labels()
    if not e.any():
        e = e.copy()
        e[0] = 1
    paths = control_paths(cohort.records)
    cfg = ModelConfig(d, latent_dim=dz, g_hidden=(6,), f_hidden=(6,), head_hidden=(6,),
                      solver=SolverConfig(steps_per_hour=1))
    return SurvivalModel(cfg, seed=seed), cohort, paths, t, e


def loss_gradient_error(seed: int, per_tensor: int = 6, eps: float = 1e-5, cfg: TrainConfig | None = None) -> float:
    """Worst relative error between tape and central-difference gradients.

    Compares ``per_tensor`` random coordinates of every parameter tensor.
    """
    model, cohort, paths, t, e = micro_instance(seed)
    cfg = cfg or TrainConfig()
    for p in model.parameters():
        p.grad = None
    loss = batch_loss(model, paths, cohort.records, t, e, cfg)[0]
    T.backward(loss)

    def value() -> float:
        with T.no_grad():
            return float(batch_loss(model, paths, cohort.records, t, e, cfg)[0].data)

    rng = np.random.default_rng([seed, 99])
    worst = 0.0
    for name, p in model.named_parameters():
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        for k in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
            old = flat[k]
            flat[k] = old + eps
            hi = value()
            flat[k] = old - eps
            lo = value()
            flat[k] = old
            num = (hi - lo) / (2 * eps)
            err = abs(grad[k] - num) / max(abs(grad[k]), abs(num), 1e-6)
            worst = max(worst, err)
    return worst
