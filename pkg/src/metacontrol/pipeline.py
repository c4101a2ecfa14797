"""End-to-end steps behind the command line, usable from Python.

Each step takes a RunConfig plus explicit inputs and returns in-memory
results; writing files is left to the caller (see ``cli``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint, CheckpointError
from .config import RunConfig
from .control import LINKS, ControlModel, FreezePolicy, attach_control_branch, set_connection_policy
from .diffusion import sample
from .evaluate import ComparisonTable, MetricsReport, PerceptualProxy, compare_report, control_fidelity
from .meta import Adam, TrainResult, adapt, baseline_joint_train, make_optimizer, meta_train
from .nn import ParamSet, init_unet_params
from .pretrain import train_base
from .tasks import DataError, Dataset, gen_dataset, get_task, load_dataset, save_dataset

KIND_KEY = "checkpoint.kind"
LINKS_KEY = "checkpoint.links"
TASK_KEY = "checkpoint.task"
METHODS = ("meta", "joint")


# ---------------------------------------------------------------- data


def generate_data(out_dir, n: int, size: int, seed: int) -> Path:
    return save_dataset(out_dir, gen_dataset(n, size, seed), seed)


def load_split(data_dir, cfg: RunConfig) -> tuple[Dataset, Dataset]:
    images = load_dataset(data_dir)
    size = images[0].pixels.shape[-1]
    if size != cfg["unet.size"]:
        raise DataError(f"dataset images are {size}px but unet.size is {cfg['unet.size']}")
    return Dataset(images).split(cfg["data.test"])


# ---------------------------------------------------------------- checkpoints


def _optimizer_fields(opt) -> dict:
    if opt is None:
        return {"optimizer_kind": "none", "optimizer_count": 0, "optimizer_state": {}}
    return {"optimizer_kind": opt.kind, "optimizer_count": opt.count, "optimizer_state": opt.state()}


def base_checkpoint(params: ParamSet, cfg: RunConfig, opt=None, rng_state: str = "") -> Checkpoint:
    config = {**cfg.as_strings(), KIND_KEY: "base"}
    return Checkpoint(config, dict(params.items()), rng_state, **_optimizer_fields(opt))


def control_checkpoint(model: ControlModel, cfg: RunConfig, opt=None, rng_state: str = "", task: str = "") -> Checkpoint:
    config = {**cfg.as_strings(), KIND_KEY: "control", LINKS_KEY: ",".join(sorted(model.connections))}
    if task:
        config[TASK_KEY] = task
    return Checkpoint(config, dict(model.params().items()), rng_state, **_optimizer_fields(opt))


def run_config_of(ck: Checkpoint) -> RunConfig:
    return RunConfig.build({k: v for k, v in ck.config.items() if not k.startswith("checkpoint.")})


def base_params_of(ck: Checkpoint) -> ParamSet:
    return ParamSet({k: v for k, v in ck.tensors.items() if k.startswith("base.")})


def model_of(ck: Checkpoint) -> ControlModel:
    """Rebuild a ControlModel from a control checkpoint."""
    if ck.config.get(KIND_KEY) != "control":
        raise CheckpointError(f"expected a control checkpoint, got kind {ck.config.get(KIND_KEY)!r}")
    cfg = run_config_of(ck)
    fresh = attach_control_branch(base_params_of(ck), cfg.unet(), cfg["seed"])
    theta_paths = list(fresh.theta)
    missing = [p for p in theta_paths if p not in ck.tensors]
    if missing:
        raise CheckpointError(f"control checkpoint lacks {missing[:3]}")
    model = fresh.with_theta(ParamSet({p: ck.tensors[p] for p in theta_paths}))
    links = [l for l in ck.config.get(LINKS_KEY, ",".join(LINKS)).split(",") if l]
    return set_connection_policy(model, set(LINKS) - set(links))


def optimizer_of(ck: Checkpoint):
    if ck.optimizer_kind == "none":
        return None
    opt = make_optimizer(ck.optimizer_kind)
    if isinstance(opt, Adam):
        opt.load_state(ck.optimizer_count, ck.optimizer_state)
    return opt


def load_checkpoint(path) -> Checkpoint:
    return ckpt_io.load(path)


# ---------------------------------------------------------------- training


def pretrain(cfg: RunConfig, train: Dataset) -> tuple[Checkpoint, list[dict]]:
    ucfg = cfg.unet()
    params = init_unet_params(ucfg, cfg["seed"], "base")
    params, opt, log, rng_state = train_base(
        params, ucfg, train, cfg.schedule(), cfg["base.steps"], cfg["base.batch"], cfg["base.lr"], cfg["seed"]
    )
    return base_checkpoint(params, cfg, opt, rng_state), log


def attach(cfg: RunConfig, base: Checkpoint, disconnected: Sequence[str] = ()) -> ControlModel:
    if base.config.get(KIND_KEY) != "base":
        raise CheckpointError(f"expected a base checkpoint, got kind {base.config.get(KIND_KEY)!r}")
    model = attach_control_branch(base_params_of(base), cfg.unet(), cfg["seed"])
    if disconnected:
        model = set_connection_policy(model, disconnected)
    return model


def train_control(
    cfg: RunConfig,
    base: Checkpoint,
    train: Dataset,
    method: str = "meta",
    disconnected: Sequence[str] = (),
    eval_fn=None,
) -> TrainResult:
    """Meta-train (or joint-train) a freshly attached control branch.

    ``eval_fn(step, model)`` is passed through to the training loop.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    model = attach(cfg, base, disconnected)
    runner = meta_train if method == "meta" else baseline_joint_train
    return runner(model, cfg.meta(), train, cfg.schedule(), eval_fn=eval_fn)


def adapt_task(cfg: RunConfig, ck: Checkpoint, task: str, train: Dataset) -> TrainResult:
    model = model_of(ck)
    return adapt(model, get_task(task), cfg.adapt(), train, cfg.schedule())


# ---------------------------------------------------------------- sampling and evaluation


def generator_for(model: ControlModel, cfg: RunConfig):
    schedule = cfg.schedule()
    fn = model.model_fn()
    dtype = np.dtype(model.config.dtype)
    use_classes = model.config.class_count is not None

    def generate(control, class_ids, seed):
        return sample(fn, control, class_ids if use_classes else None, schedule, schedule.T, seed, dtype=dtype)

    return generate


def sample_task(model: ControlModel, cfg: RunConfig, task: str, test: Dataset, n: int, seed: int):
    """(controls, samples, references) for the first ``n`` test items."""
    if n > len(test):
        raise DataError(f"asked for {n} samples but the test split has {len(test)}")
    batch = test.batch(list(range(n)), get_task(task), np.dtype(model.config.dtype))
    samples = generator_for(model, cfg)(batch.control, batch.class_ids, seed)
    return batch.control, samples, batch.x0


def evaluate(
    models: Mapping[str, tuple[ControlModel, str]],
    cfg: RunConfig,
    tasks: Sequence[str],
    test: Dataset,
    n: int,
    seed: int,
) -> list[MetricsReport]:
    """One report per (method, task); ``models`` maps method -> (model, checkpoint id).

    The proxy network is fixed by ``eval.proxy-seed`` so scores are comparable across sampling seeds.
    """
    proxy = PerceptualProxy(cfg["eval.proxy-seed"])
    reports = []
    for method, (model, ck_id) in models.items():
        gen = generator_for(model, cfg)
        for task in sorted(tasks):
            reports.append(
                control_fidelity(gen, get_task(task), test, n, seed, method, proxy, cfg.hash(), ck_id)
            )
    return reports


@dataclass
class AblationResult:
    reports: list[MetricsReport]
    logs: dict[str, list[dict]] = field(default_factory=dict)
    grad_logs: dict[str, list[dict]] = field(default_factory=dict)
    checkpoints: dict[str, Checkpoint] = field(default_factory=dict)

    def table(self, metric: str) -> ComparisonTable:
        return compare_report(self.reports, metric)


def ablate_freeze(cfg: RunConfig, base: Checkpoint, train: Dataset, test: Dataset, policies: Sequence[str] | None = None) -> AblationResult:
    """Meta-train once per freeze policy (shared seed) and evaluate zero-shot."""
    policies = list(policies or [p.value for p in FreezePolicy])
    out = AblationResult([])
    models = {}
    for policy in policies:
        run_cfg = cfg.override({"meta.freeze": policy})
        res = train_control(run_cfg, base, train, "meta")
        ck = control_checkpoint(res.model, run_cfg, res.optimizer, res.rng_state)
        out.logs[policy], out.grad_logs[policy], out.checkpoints[policy] = res.log, res.grad_log, ck
        models[policy] = (res.model, ck.digest())
    out.reports = evaluate(models, cfg, cfg["eval.tasks"], test, cfg["eval.n"], cfg["seed"])
    return out


def ablate_connection(cfg: RunConfig, base: Checkpoint, train: Dataset, test: Dataset, blocks: Sequence[str] | None = None) -> AblationResult:
    """Fully connected run plus one run per disconnected decoder input."""
    blocks = list(blocks or ["dec1", "dec2", "dec3", "dec4"])
    out = AblationResult([])
    models = {}
    for name, cut in [("full", [])] + [(f"no-{b}", [b]) for b in blocks]:
        res = train_control(cfg, base, train, "meta", disconnected=cut)
        ck = control_checkpoint(res.model, cfg, res.optimizer, res.rng_state)
        out.logs[name], out.grad_logs[name], out.checkpoints[name] = res.log, res.grad_log, ck
        models[name] = (res.model, ck.digest())
    out.reports = evaluate(models, cfg, cfg["eval.tasks"], test, cfg["eval.n"], cfg["seed"])
    return out


def parse_block(name: str) -> str:
    """Accept ``4``, ``dec4`` or ``mid`` as a decoder connection name."""
    name = name.strip()
    if name.isdigit():
        name = f"dec{name}"
    if name not in LINKS:
        raise ValueError(f"unknown decoder connection {name!r}; valid: 1-4, {', '.join(LINKS)}")
    return name
