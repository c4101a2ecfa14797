"""Flat ``key=value`` run configuration.

Every tunable lives under a dotted key (``meta.freeze``, ``unet.size``).
Files hold one pair per line; ``#`` starts a comment. Unknown keys and
unparseable values raise ConfigError. The canonical text (every key,
sorted, with resolved values) is what gets hashed into reports and
stored in checkpoints.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .control import FreezePolicy
from .diffusion import NoiseSchedule
from .meta import OPTIMIZERS, AdaptConfig, MetaConfig
from .nn import ConfigError, UNetConfig
from .tasks import TASKS


def _int(v: str) -> int:
    return int(v)


def _float(v: str) -> float:
    x = float(v)
    if x != x or x in (float("inf"), float("-inf")):
        raise ValueError("must be finite")
    return x


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true/false")


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(p) for p in v.split(",") if p.strip())


def _tasks(v: str) -> tuple[str, ...]:
    names = tuple(sorted(p.strip() for p in v.split(",") if p.strip()))
    for n in names:
        if n not in TASKS:
            raise ValueError(f"unknown task {n!r}")
    return names


def _choice(options: Iterable[str]) -> Callable[[str], str]:
    options = tuple(options)

    def parse(v: str) -> str:
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v

    return parse


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# key -> (parser, default)
KEYS: dict[str, tuple[Callable[[str], object], object]] = {
    "seed": (_int, 0),
    "dtype": (_choice(("float32", "float64")), "float32"),
    "data.test": (_int, 128),
    "unet.size": (_int, 16),
    "unet.channels": (_int, 8),
    "unet.mult": (_ints, (1, 2, 2, 4)),
    "unet.temb": (_int, 32),
    "unet.classes": (_int, 0),
    "diffusion.T": (_int, 200),
    "diffusion.beta-start": (_float, 1e-4),
    "diffusion.beta-end": (_float, 0.02),
    "base.steps": (_int, 1500),
    "base.batch": (_int, 32),
    "base.lr": (_float, 2e-3),
    "meta.inner-alpha": (_float, 1e-2),
    "meta.outer-alpha": (_float, 1e-2),
    "meta.tasks": (_tasks, ("depth", "seg", "sobel")),
    "meta.batch": (_int, 24),
    "meta.grad-accum": (_int, 1),
    "meta.steps": (_int, 300),
    "meta.freeze": (_choice(p.value for p in FreezePolicy), "enc4mid"),
    "meta.optimizer": (_choice(OPTIMIZERS), "adaptive-moment"),
    "meta.log-timing": (_bool, False),
    "adapt.steps": (_int, 100),
    "adapt.grad-accum": (_int, 2),
    "adapt.shots": (_int, 64),
    "adapt.batch": (_int, 8),
    "adapt.alpha": (_float, 1e-2),
    "adapt.optimizer": (_choice(OPTIMIZERS), "adaptive-moment"),
    "adapt.log-timing": (_bool, False),
    "eval.n": (_int, 64),
    "eval.tasks": (_tasks, ("canny",)),
    "eval.proxy-seed": (_int, 0),
}
# ``meta.alpha`` sets both loop rates unless one is given explicitly
ALIASES = {"meta.alpha": ("meta.inner-alpha", "meta.outer-alpha")}


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected key=value, got {raw.strip()!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in KEYS and k not in ALIASES:
            raise ConfigError(f"{source}:{no}: unknown config key {k!r}")
        out[k] = v
    return out


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, object]

    @classmethod
    def build(cls, *layers: Mapping[str, str]) -> "RunConfig":
        """Later layers override earlier ones; aliases yield to explicit keys."""
        raw: dict[str, str] = {}
        explicit: set[str] = set()
        for layer in layers:
            for k, v in layer.items():
                if k in ALIASES:
                    for target in ALIASES[k]:
                        if target not in explicit:
                            raw[target] = v
                elif k in KEYS:
                    raw[k] = v
                    explicit.add(k)
                else:
                    raise ConfigError(f"unknown config key {k!r}")
        values = {}
        for k, (parse, default) in KEYS.items():
            if k in raw:
                try:
                    values[k] = parse(raw[k])
                except ValueError as exc:
                    raise ConfigError(f"bad value for {k}: {raw[k]!r} ({exc})") from None
            else:
                values[k] = default
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, overrides: Mapping[str, str] | None = None) -> "RunConfig":
        layers = []
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            layers.append(parse_lines(p.read_text(encoding="utf-8"), str(p)))
        layers.append(dict(overrides or {}))
        return cls.build(*layers)

    def __getitem__(self, key: str):
        return self.values[key]

    def override(self, pairs: Mapping[str, object]) -> "RunConfig":
        """Copy with some dotted keys replaced."""
        return RunConfig.build(self.as_strings(), {k: _fmt(v) for k, v in pairs.items()})

    def as_strings(self) -> dict[str, str]:
        return {k: _fmt(v) for k, v in self.values.items()}

    def text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in sorted(self.as_strings().items()))

    def hash(self) -> str:
        return hashlib.sha256(self.text().encode("utf-8")).hexdigest()[:16]

    def validate(self) -> None:
        try:
            self.unet()
            self.schedule()
            self.meta()
            self.adapt()
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from None
        if self["data.test"] < 1:
            raise ConfigError("data.test must be >= 1")
        for k in ("base.steps", "base.batch", "eval.n"):
            if self[k] < (0 if k == "base.steps" else 1):
                raise ConfigError(f"{k} out of range")

    def unet(self) -> UNetConfig:
        return UNetConfig(
            image_size=self["unet.size"],
            base_channels=self["unet.channels"],
            channel_mult=self["unet.mult"],
            time_embed_dim=self["unet.temb"],
            class_count=self["unet.classes"] or None,
            dtype=self["dtype"],
        )

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self["diffusion.T"], self["diffusion.beta-start"], self["diffusion.beta-end"])

    def meta(self) -> MetaConfig:
        return MetaConfig(
            inner_alpha=self["meta.inner-alpha"],
            outer_alpha=self["meta.outer-alpha"],
            tasks=self["meta.tasks"],
            total_batch=self["meta.batch"],
            grad_accum=self["meta.grad-accum"],
            steps=self["meta.steps"],
            freeze=self["meta.freeze"],
            optimizer=self["meta.optimizer"],
            seed=self["seed"],
            log_timing=self["meta.log-timing"],
        )

    def adapt(self) -> AdaptConfig:
        return AdaptConfig(
            steps=self["adapt.steps"],
            grad_accum=self["adapt.grad-accum"],
            shots=self["adapt.shots"],
            batch_size=self["adapt.batch"],
            alpha=self["adapt.alpha"],
            optimizer=self["adapt.optimizer"],
            seed=self["seed"],
            log_timing=self["adapt.log-timing"],
        )
