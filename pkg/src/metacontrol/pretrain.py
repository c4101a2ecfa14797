"""Unconditional pretraining of the base U-Net on shape images."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .diffusion import Batch, NoiseSchedule, draw_noise, training_loss
from .meta import Adam, gradient
from .nn import FreezeMask, ParamSet, UNetConfig, unet_forward
from .rng import generator_state, substream
from .tasks import Dataset


def base_objective(config: UNetConfig, batch: Batch, schedule: NoiseSchedule, t, eps):
    def objective(params):
        def fn(x_t, tt, control, class_ids):
            return unet_forward(params, config, x_t, tt, class_ids, "base")

        return training_loss(fn, batch, schedule, t=t, eps=eps)

    return objective


def train_base(
    params: ParamSet,
    config: UNetConfig,
    dataset: Dataset,
    schedule: NoiseSchedule,
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
    log_timing: bool = False,
    callback: Callable[[int, float], None] | None = None,
) -> tuple[ParamSet, Adam, list[dict], str]:
    """Adam on the epsilon-prediction loss; class ids are fed when the
    config has a class embedding.

    Returns the trained parameters, the optimizer, the loss log and the
    serialized state of the batch-order generator.
    """
    rng = substream(seed, "training", 0)
    noise_rng = substream(seed, "training", 2)
    opt = Adam()
    mask = FreezeMask()
    dtype = np.dtype(config.dtype)
    log = []
    order = np.empty(0, dtype=np.int64)
    pos = 0
    for step in range(1, steps + 1):
        started = time.perf_counter()
        if pos + batch_size > len(order):
            order, pos = rng.permutation(len(dataset)), 0
        ids = order[pos : pos + batch_size]
        pos += batch_size
        x0 = np.stack([dataset[int(i)].pixels for i in ids]).astype(dtype)
        cls = np.array([dataset[int(i)].class_id for i in ids]) if config.class_count else None
        batch = Batch(x0, None, cls, ids)
        t, eps = draw_noise(batch, schedule, noise_rng)
        loss, grads = gradient(base_objective(config, batch, schedule, t, eps), params, mask)
        params = opt.step(params, grads, lr, mask)
        wall = (time.perf_counter() - started) * 1000.0 if log_timing else 0.0
        gnorm = float(np.sqrt(sum(float(np.sum(np.square(grads[k], dtype=np.float64))) for k in sorted(grads))))
        log.append({"step": step, "task": "base", "loss": loss, "grad-norm": gnorm, "wall-ms": wall})
        if callback is not None:
            callback(step, loss)
    return params, opt, log, generator_state(rng)
