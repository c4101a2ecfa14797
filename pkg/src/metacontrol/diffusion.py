"""DDPM noising, epsilon-prediction loss and ancestral sampling in pixel space."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .rng import substream
from .tensor import Tensor


class NonFiniteError(FloatingPointError):
    """A loss, gradient or update contained NaN or inf."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule; arrays are float64 and indexed by timestep."""

    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.T < 2:
            raise ValueError(f"schedule needs at least 2 steps, got T={self.T}")
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError("need 0 < beta_start < beta_end < 1")

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)


@dataclass
class Batch:
    """Clean images with their control maps and optional class ids."""

    x0: np.ndarray
    control: np.ndarray | None = None
    class_ids: np.ndarray | None = None
    ids: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.x0)

    def concat(self, other: "Batch") -> "Batch":
        def cat(a, b):
            return None if a is None else np.concatenate([a, b])

        return Batch(
            np.concatenate([self.x0, other.x0]),
            cat(self.control, other.control),
            cat(self.class_ids, other.class_ids),
            cat(self.ids, other.ids),
        )


def _check_t(t, schedule: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t)
    if not np.issubdtype(t.dtype, np.integer):
        raise TypeError("timesteps must be integers")
    if t.size and (t.min() < 0 or t.max() >= schedule.T):
        raise ValueError(f"timestep out of range [0, {schedule.T})")
    return t


def forward_noise(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps, with t scalar or per item."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} does not match x0 shape {x0.shape}")
    t = _check_t(t, schedule)
    abar = schedule.alpha_bars[t]
    if abar.ndim:
        abar = abar.reshape((-1,) + (1,) * (x0.ndim - 1))
    out = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps
    return out.astype(x0.dtype, copy=False)


# model(x_t: Tensor, t: int array, control: ndarray | None, class_ids: ndarray | None) -> Tensor
ModelFn = Callable[[Tensor, np.ndarray, "np.ndarray | None", "np.ndarray | None"], Tensor]


def draw_noise(batch: Batch, schedule: NoiseSchedule, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Stratified uniform timesteps and unit-Gaussian noise for every item.

    Item ``i`` of a shuffled order draws from the i-th of ``n`` equal slices of [0, T), so each
    timestep is still marginally uniform but a batch covers the whole schedule.
    """
    n = len(batch)
    u = (rng.permutation(n) + rng.uniform(size=n)) / n
    t = np.minimum((u * schedule.T).astype(np.int64), schedule.T - 1)
    eps = rng.standard_normal(batch.x0.shape).astype(batch.x0.dtype)
    return t, eps


def training_loss(
    model: ModelFn,
    batch: Batch,
    schedule: NoiseSchedule,
    rng: np.random.Generator | None = None,
    t: np.ndarray | None = None,
    eps: np.ndarray | None = None,
) -> Tensor:
    """Mean squared error between the true and predicted noise.

    Timesteps and noise are drawn from ``rng`` unless both are given.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if t is None or eps is None:
        if rng is None:
            raise ValueError("need rng or explicit (t, eps)")
        t, eps = draw_noise(batch, schedule, rng)
    x_t = forward_noise(batch.x0, t, eps, schedule)
    pred = model(Tensor(x_t), np.asarray(t), batch.control, batch.class_ids)
    loss = T.mse_loss(pred, Tensor(eps))
    if not np.isfinite(loss.data):
        per_item = ((pred.data - eps) ** 2).reshape(len(batch), -1).mean(axis=1)
        bad = np.flatnonzero(~np.isfinite(per_item))
        raise NonFiniteError(f"non-finite diffusion loss at batch index {int(bad[0]) if bad.size else -1}")
    return loss


def sample(
    model: ModelFn,
    control: np.ndarray | None,
    class_ids: np.ndarray | None,
    schedule: NoiseSchedule,
    steps: int,
    seed: int,
    shape: tuple[int, ...] | None = None,
    dtype=np.float32,
) -> np.ndarray:
    """Ancestral DDPM sampling over all T steps, clamped to [-1, 1].

    ``shape`` defaults to the control batch shape.
    """
    if steps != schedule.T:
        raise ValueError(f"only full ancestral sampling is supported (steps must equal T={schedule.T})")
    if shape is None:
        if control is None:
            raise ValueError("need a control batch or an explicit shape")
        shape = np.asarray(control).shape
    rng = substream(seed, "sampling")
    betas, alphas, abars = schedule.betas, schedule.alphas, schedule.alpha_bars
    x = rng.standard_normal(shape).astype(dtype)
    n = shape[0]
    with T.no_grad():
        for step in range(schedule.T - 1, -1, -1):
            tt = np.full(n, step, dtype=np.int64)
            eps = model(Tensor(x), tt, control, class_ids).data
            # predicted x0, clipped to the data range, then the q(x_{t-1} | x_t, x0) posterior
            x0 = np.clip((x - np.sqrt(1.0 - abars[step]) * eps) / np.sqrt(abars[step]), -1.0, 1.0)
            if step > 0:
                abar_prev = abars[step - 1]
                c0 = np.sqrt(abar_prev) * betas[step] / (1.0 - abars[step])
                ct = np.sqrt(alphas[step]) * (1.0 - abar_prev) / (1.0 - abars[step])
                var = betas[step] * (1.0 - abar_prev) / (1.0 - abars[step])
                x = c0 * x0 + ct * x + np.sqrt(var) * rng.standard_normal(shape)
            else:
                x = x0
            x = x.astype(dtype)
    return np.clip(x, -1.0, 1.0)
