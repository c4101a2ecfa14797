"""First-order MAML over control tasks, with layer freezing in both loops.

One meta step, per accumulation round and per task (sorted by name):

    theta_task = theta - inner_alpha * grad L_task(theta)      (inner loop)
    g_task     = grad L_task(theta_task)                        (same images)

then ``meta_grad = mean_task g_task``, averaged over accumulation rounds,
and ``theta <- optimizer(theta, meta_grad)``. Frozen paths never move.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .control import ControlModel, FreezePolicy, freeze_mask_for
from .diffusion import Batch, NoiseSchedule, NonFiniteError, draw_noise, training_loss
from .nn import FreezeMask, ParamSet
from .rng import substream
from .tasks import Dataset, TaskSpec, get_task, make_batches
from .tensor import Tensor

OPTIMIZERS = ("plain-sgd", "adaptive-moment")
LOG_COLUMNS = ("step", "task", "loss", "grad-norm", "wall-ms")
GRAD_COLUMNS = ("step", "group", "grad-norm")

Objective = Callable[[Mapping[str, Tensor]], Tensor]


@dataclass
class MetaConfig:
    inner_alpha: float = 1e-4
    outer_alpha: float = 1e-4
    tasks: tuple[str, ...] = ("depth", "seg", "sobel")
    total_batch: int = 24
    grad_accum: int = 4
    steps: int = 300
    freeze: str = "enc4mid"
    inner_steps: int = 1
    optimizer: str = "adaptive-moment"
    seed: int = 0
    log_timing: bool = False

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        if not self.tasks:
            raise ValueError("need at least one task")
        if self.total_batch % len(self.tasks):
            raise ValueError(f"total batch {self.total_batch} not divisible by {len(self.tasks)} tasks")
        if self.inner_steps != 1:
            raise ValueError("only a single inner step is supported")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.grad_accum < 1 or self.steps < 0:
            raise ValueError("grad_accum must be >= 1 and steps >= 0")
        FreezePolicy(self.freeze)

    @property
    def task_specs(self) -> list[TaskSpec]:
        return [get_task(n) for n in self.tasks]


@dataclass
class AdaptConfig:
    steps: int = 100
    grad_accum: int = 8
    shots: int = 16
    batch_size: int = 8
    alpha: float = 1e-4
    optimizer: str = "adaptive-moment"
    seed: int = 0
    freeze: str = "none"
    log_timing: bool = False

    def __post_init__(self):
        if FreezePolicy(self.freeze) is not FreezePolicy.NONE:
            raise ValueError("adaptation trains every control parameter (freeze must be 'none')")
        if self.steps > 0 and self.shots < 1:
            raise ValueError("adaptation with steps > 0 needs at least one shot")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")


# ---------------------------------------------------------------- optimizers


class Optimizer:
    kind = "base"

    def step(self, theta: ParamSet, grads: Mapping[str, np.ndarray], alpha: float, mask: FreezeMask) -> ParamSet:
        raise NotImplementedError

    def state(self) -> dict[str, np.ndarray]:
        return {}

    @property
    def count(self) -> int:
        return 0


class SGD(Optimizer):
    kind = "plain-sgd"

    def step(self, theta, grads, alpha, mask):
        updates = {}
        for path, p in theta.items():
            if mask.frozen(path) or path not in grads:
                continue
            new = p - p.dtype.type(alpha) * grads[path]
            if not np.all(np.isfinite(new)):
                raise NonFiniteError(f"non-finite update for {path}")
            updates[path] = new.astype(p.dtype, copy=False)
        return theta.replace(updates)


class Adam(Optimizer):
    """Adaptive-moment steps with bias correction; moments live outside theta."""

    kind = "adaptive-moment"

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    @property
    def count(self) -> int:
        return self.t

    def step(self, theta, grads, alpha, mask):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        updates = {}
        for path, p in theta.items():
            if mask.frozen(path) or path not in grads:
                continue
            g = grads[path]
            m = self.m.get(path)
            v = self.v.get(path)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[path], self.v[path] = m.astype(p.dtype), v.astype(p.dtype)
            new = p - alpha * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(new)):
                raise NonFiniteError(f"non-finite update for {path}")
            updates[path] = new.astype(p.dtype)
        return theta.replace(updates)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, count: int, arrays: Mapping[str, np.ndarray]) -> None:
        self.t = count
        self.m = {k[2:]: v for k, v in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: v for k, v in arrays.items() if k.startswith("v/")}


def make_optimizer(kind: str) -> Optimizer:
    if kind == "plain-sgd":
        return SGD()
    if kind == "adaptive-moment":
        return Adam()
    raise ValueError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------- primitives


def gradient(objective: Objective, theta: ParamSet, mask: FreezeMask, name: str = "") -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and gradient of ``objective`` at ``theta``.

    Frozen paths and paths the loss does not reach get exact zeros.
    """
    tensors = theta.tensors(mask.trainable)
    loss = objective(tensors)
    loss.backward()
    grads = {}
    for path, t in tensors.items():
        g = t.grad if t.requires_grad else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {path}" + (f" in task {name}" if name else ""))
        grads[path] = g
    value = float(loss.data)
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite loss" + (f" in task {name}" if name else ""))
    return value, grads


def sgd_update(theta: ParamSet, grads: Mapping[str, np.ndarray], alpha: float, mask: FreezeMask) -> ParamSet:
    updates = {}
    for path, p in theta.items():
        if mask.frozen(path):
            continue
        updates[path] = (p - p.dtype.type(alpha) * grads[path]).astype(p.dtype, copy=False)
    return theta.replace(updates)


def inner_step(theta: ParamSet, objective: Objective, alpha: float, mask: FreezeMask, name: str = "") -> ParamSet:
    """theta - alpha * grad(objective)(theta) on unfrozen paths; theta is not modified."""
    _, grads = gradient(objective, theta, mask, name)
    return sgd_update(theta, grads, alpha, mask)


def average_grads(per_task: Mapping[str, Mapping[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Arithmetic mean over tasks, summed in sorted task-name order."""
    if not per_task:
        raise ValueError("meta gradient needs at least one task")
    names = sorted(per_task)
    paths = list(per_task[names[0]])
    out = {}
    for path in paths:
        acc = per_task[names[0]][path].copy()
        for n in names[1:]:
            acc = acc + per_task[n][path]
        out[path] = acc / len(names)
    return out


def meta_gradient(
    per_task: Mapping[str, tuple[ParamSet, Objective]],
    mask: FreezeMask,
) -> dict[str, np.ndarray]:
    """Mean over tasks of grad L_task evaluated at each task's adapted theta.

    First order: the inner step is not differentiated through.
    """
    if not per_task:
        raise ValueError("meta gradient needs at least one task")
    grads = {}
    for name in sorted(per_task):
        theta_task, objective = per_task[name]
        grads[name] = gradient(objective, theta_task, mask, name)[1]
    return average_grads(grads)


def outer_step(
    theta: ParamSet,
    meta_grad: Mapping[str, np.ndarray],
    alpha: float,
    mask: FreezeMask,
    optimizer: Optimizer | None = None,
) -> ParamSet:
    """Apply the meta gradient with ``optimizer`` (plain SGD when None)."""
    for path in theta:
        if path not in meta_grad:
            raise KeyError(f"meta gradient lacks {path}")
    return (optimizer or SGD()).step(theta, meta_grad, alpha, mask)


def task_objective(model: ControlModel, batch: Batch, schedule: NoiseSchedule, t, eps) -> Objective:
    """Diffusion loss on a fixed batch with fixed timesteps and noise."""

    def objective(theta: Mapping[str, Tensor]) -> Tensor:
        return training_loss(model.model_fn(theta), batch, schedule, t=t, eps=eps)

    return objective


# ---------------------------------------------------------------- training loops


@dataclass
class TrainResult:
    model: ControlModel
    optimizer: Optimizer
    log: list[dict] = field(default_factory=list)
    grad_log: list[dict] = field(default_factory=list)
    images_drawn: int = 0
    rng_state: str = ""


def _norm(grads: Mapping[str, np.ndarray], paths: Iterable[str] | None = None) -> float:
    keys = sorted(grads) if paths is None else paths
    return float(np.sqrt(sum(float(np.sum(np.square(grads[k], dtype=np.float64))) for k in keys)))


def grad_group(path: str) -> str:
    parts = path.split(".")
    return ".".join(parts[:2])


def _group_rows(step: int, grads: Mapping[str, np.ndarray]) -> list[dict]:
    groups: dict[str, list[str]] = {}
    for path in sorted(grads):
        groups.setdefault(grad_group(path), []).append(path)
    return [{"step": step, "group": g, "grad-norm": _norm(grads, ps)} for g, ps in sorted(groups.items())]


def _stream_state(stream) -> str:
    from .rng import generator_state

    return generator_state(stream._rng)


def meta_train(
    model: ControlModel,
    config: MetaConfig,
    dataset: Dataset,
    schedule: NoiseSchedule,
    optimizer: Optimizer | None = None,
    eval_fn: Callable[[int, ControlModel], None] | None = None,
) -> TrainResult:
    """FO-MAML meta-training of the control parameters.

    Logs, per step and task, the pre-adaptation loss and the norm of the
    task's outer gradient; a second log records per-group meta-gradient
    norms. ``eval_fn(step, model)`` is called after every outer step.
    """
    tasks = config.task_specs
    mask = freeze_mask_for(config.freeze)
    optimizer = optimizer or make_optimizer(config.optimizer)
    stream = make_batches(dataset, tasks, config.total_batch, config.seed, np.dtype(model.config.dtype))
    noise_rng = substream(config.seed, "training", 2)
    theta = model.theta
    log, grad_log = [], []
    for step in range(1, config.steps + 1):
        started = time.perf_counter()
        acc: dict[str, np.ndarray] | None = None
        task_loss = {t.name: 0.0 for t in tasks}
        task_grads: dict[str, dict[str, np.ndarray]] = {}
        for _ in range(config.grad_accum):
            batches = next(stream)
            per_task = {}
            for task in stream.tasks:
                batch = batches[task.name]
                t, eps = draw_noise(batch, schedule, noise_rng)
                objective = task_objective(model, batch, schedule, t, eps)
                loss, g0 = gradient(objective, theta, mask, task.name)
                task_loss[task.name] += loss / config.grad_accum
                theta_task = sgd_update(theta, g0, config.inner_alpha, mask)
                per_task[task.name] = (theta_task, objective)
            grads_by_task = {
                name: gradient(obj, th, mask, name)[1] for name, (th, obj) in sorted(per_task.items())
            }
            for name, g in grads_by_task.items():
                prev = task_grads.get(name)
                task_grads[name] = g if prev is None else {k: prev[k] + g[k] for k in g}
            round_grad = average_grads(grads_by_task)
            acc = round_grad if acc is None else {k: acc[k] + round_grad[k] for k in acc}
        meta_grad = {k: v / config.grad_accum for k, v in acc.items()}
        theta = outer_step(theta, meta_grad, config.outer_alpha, mask, optimizer)
        wall = (time.perf_counter() - started) * 1000.0 if config.log_timing else 0.0
        for task in stream.tasks:
            gnorm = _norm(task_grads[task.name]) / config.grad_accum
            log.append({"step": step, "task": task.name, "loss": task_loss[task.name], "grad-norm": gnorm, "wall-ms": wall})
        grad_log.extend(_group_rows(step, meta_grad))
        if eval_fn is not None:
            eval_fn(step, model.with_theta(theta))
    return TrainResult(model.with_theta(theta), optimizer, log, grad_log, stream.drawn, _stream_state(stream))


def baseline_joint_train(
    model: ControlModel,
    config: MetaConfig,
    dataset: Dataset,
    schedule: NoiseSchedule,
    optimizer: Optimizer | None = None,
    eval_fn: Callable[[int, ControlModel], None] | None = None,
) -> TrainResult:
    """Single-loop multi-task training on the same batches and noise draws.

    Each step averages the per-task gradients at theta (the gradient of the
    mixed-batch loss) and applies one optimizer step under the same mask.
    """
    tasks = config.task_specs
    mask = freeze_mask_for(config.freeze)
    optimizer = optimizer or make_optimizer(config.optimizer)
    stream = make_batches(dataset, tasks, config.total_batch, config.seed, np.dtype(model.config.dtype))
    noise_rng = substream(config.seed, "training", 2)
    theta = model.theta
    log, grad_log = [], []
    for step in range(1, config.steps + 1):
        started = time.perf_counter()
        acc = None
        task_loss = {t.name: 0.0 for t in tasks}
        task_norm = {t.name: 0.0 for t in tasks}
        for _ in range(config.grad_accum):
            batches = next(stream)
            per_task = {}
            for task in stream.tasks:
                batch = batches[task.name]
                t, eps = draw_noise(batch, schedule, noise_rng)
                loss, g = gradient(task_objective(model, batch, schedule, t, eps), theta, mask, task.name)
                task_loss[task.name] += loss / config.grad_accum
                task_norm[task.name] += _norm(g) / config.grad_accum
                per_task[task.name] = g
            round_grad = average_grads(per_task)
            acc = round_grad if acc is None else {k: acc[k] + round_grad[k] for k in acc}
        grad = {k: v / config.grad_accum for k, v in acc.items()}
        theta = outer_step(theta, grad, config.outer_alpha, mask, optimizer)
        wall = (time.perf_counter() - started) * 1000.0 if config.log_timing else 0.0
        for task in stream.tasks:
            log.append(
                {"step": step, "task": task.name, "loss": task_loss[task.name], "grad-norm": task_norm[task.name], "wall-ms": wall}
            )
        grad_log.extend(_group_rows(step, grad))
        if eval_fn is not None:
            eval_fn(step, model.with_theta(theta))
    return TrainResult(model.with_theta(theta), optimizer, log, grad_log, stream.drawn, _stream_state(stream))


def adapt(
    model: ControlModel,
    task: TaskSpec,
    config: AdaptConfig,
    dataset: Dataset,
    schedule: NoiseSchedule,
    eval_fn: Callable[[int, ControlModel], bool | None] | None = None,
) -> TrainResult:
    """Plain single-task finetuning of every control parameter.

    Uses the first ``shots`` images of ``dataset``. With ``steps == 0`` the
    model is returned unchanged (zero-shot path). ``eval_fn`` may return
    True to stop early.
    """
    optimizer = make_optimizer(config.optimizer)
    if config.steps == 0:
        return TrainResult(model, optimizer)
    if config.shots > len(dataset):
        raise ValueError(f"{config.shots} shots requested but dataset has {len(dataset)} images")
    pool = Dataset(dataset.images[: config.shots])
    per_batch = min(config.batch_size, config.shots)
    stream = make_batches(pool, [task], per_batch, config.seed, np.dtype(model.config.dtype))
    noise_rng = substream(config.seed, "training", 3)
    mask = FreezeMask()
    theta = model.theta
    log, grad_log = [], []
    for step in range(1, config.steps + 1):
        started = time.perf_counter()
        acc = None
        loss_sum = 0.0
        for _ in range(config.grad_accum):
            batch = next(stream)[task.name]
            t, eps = draw_noise(batch, schedule, noise_rng)
            loss, g = gradient(task_objective(model, batch, schedule, t, eps), theta, mask, task.name)
            loss_sum += loss / config.grad_accum
            acc = g if acc is None else {k: acc[k] + g[k] for k in acc}
        grad = {k: v / config.grad_accum for k, v in acc.items()}
        theta = outer_step(theta, grad, config.alpha, mask, optimizer)
        wall = (time.perf_counter() - started) * 1000.0 if config.log_timing else 0.0
        log.append({"step": step, "task": task.name, "loss": loss_sum, "grad-norm": _norm(grad), "wall-ms": wall})
        grad_log.extend(_group_rows(step, grad))
        if eval_fn is not None and eval_fn(step, model.with_theta(theta)):
            break
    return TrainResult(model.with_theta(theta), optimizer, log, grad_log, stream.drawn, _stream_state(stream))


def fixed_eval_loss(model: ControlModel, batch: Batch, schedule: NoiseSchedule, seed: int, repeats: int = 4) -> float:
    """Diffusion loss on ``batch`` with a fixed set of (t, eps) draws."""
    rng = substream(seed, "eval", 7)
    total = 0.0
    fn = model.model_fn()
    from .tensor import no_grad

    with no_grad():
        for _ in range(repeats):
            t, eps = draw_noise(batch, schedule, rng)
            total += float(training_loss(fn, batch, schedule, t=t, eps=eps).data)
    return total / repeats
