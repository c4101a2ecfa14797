"""ControlNet-style control branch attached to a frozen base U-Net.

The branch is a clone of the base encoder and middle block. It sees the
noisy image plus a hint embedding of the control map, and each of its
outputs reaches the base decoder through a 1x1 convolution initialized
to zero, so a freshly attached model reproduces the base model exactly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .nn import (
    ENC_BLOCKS,
    ConfigError,
    FreezeMask,
    ParamSet,
    UNetConfig,
    _conv,
    decode,
    embed,
    encode,
    init_unet_params,
)
from .rng import substream
from .tensor import Tensor

LINKS = ("dec1", "dec2", "dec3", "dec4", "mid")
# zero link feeding each decoder connection
LINK_SOURCE = {"dec1": "zc.enc1", "dec2": "zc.enc2", "dec3": "zc.enc3", "dec4": "zc.enc4", "mid": "zc.mid"}


class FreezePolicy(str, enum.Enum):
    NONE = "none"
    ENC4MID = "enc4mid"
    ENC2TO4MID = "enc2to4mid"
    ENC1TO3 = "enc1to3"

    @property
    def blocks(self) -> tuple[str, ...]:
        return _POLICY_BLOCKS[self]


_POLICY_BLOCKS = {
    FreezePolicy.NONE: (),
    FreezePolicy.ENC4MID: ("enc4", "mid"),
    FreezePolicy.ENC2TO4MID: ("enc2", "enc3", "enc4", "mid"),
    FreezePolicy.ENC1TO3: ("enc1", "enc2", "enc3"),
}


def freeze_mask_for(policy: FreezePolicy | str) -> FreezeMask:
    """Mask over control-branch paths; base parameters are frozen separately."""
    policy = FreezePolicy(policy)
    return FreezeMask(f"ctrl.{b}" for b in policy.blocks)


BASE_FROZEN = FreezeMask(["base"])


@dataclass(frozen=True)
class ControlModel:
    """Frozen base parameters plus the trainable control parameters.

    ``theta`` holds every ``ctrl.*``, ``hint.*`` and ``zc.*`` path.
    ``connections`` lists the decoder inputs that receive control signals.
    """

    config: UNetConfig
    base: ParamSet
    theta: ParamSet
    connections: frozenset[str] = field(default_factory=lambda: frozenset(LINKS))
    _base_tensors: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self._base_tensors is None:
            object.__setattr__(self, "_base_tensors", self.base.tensors())

    def with_theta(self, theta: ParamSet) -> "ControlModel":
        if list(theta) != list(self.theta):
            raise KeyError("theta paths do not match the model")
        return replace(self, theta=theta, _base_tensors=self._base_tensors)

    def params(self) -> ParamSet:
        return self.base.merge(self.theta)

    def forward(self, theta: Mapping[str, Tensor] | None, x_t, t, control, class_ids=None) -> Tensor:
        """Predict noise. ``theta`` maps paths to Tensors (None: use stored values)."""
        cfg = self.config
        if theta is None:
            theta = self.theta.tensors()
        if not isinstance(x_t, Tensor):
            x_t = Tensor(np.asarray(x_t, dtype=cfg.dtype))
        if control is None:
            raise ValueError("control branch needs a control image")
        control = np.asarray(control, dtype=cfg.dtype)
        if control.shape != x_t.shape:
            raise T.ShapeError(f"control shape {control.shape} does not match input {x_t.shape}")
        p = {**self._base_tensors, **theta}
        temb = embed(p, "base", t, class_ids, cfg)
        skips, mid = encode(p, "base", x_t, temb)
        h = Tensor(control)
        h = T.silu(T.conv2d(h, p["hint.conv1.w"], p["hint.conv1.b"], 1, 1))
        h = T.silu(T.conv2d(h, p["hint.conv2.w"], p["hint.conv2.b"], 1, 1))
        hint = T.conv2d(h, p["hint.conv3.w"], p["hint.conv3.b"], 1, 1)
        cskips, cmid = encode(p, "ctrl", x_t, temb, hint=hint)
        residuals = {}
        for link in sorted(self.connections):
            src = cmid if link == "mid" else cskips[int(link[-1]) - 1]
            zc = LINK_SOURCE[link]
            residuals[link] = T.conv2d(src, p[f"{zc}.w"], p[f"{zc}.b"], 1, 0)
        return decode(p, "base", mid, skips, temb, residuals)

    def model_fn(self, theta: Mapping[str, Tensor] | None = None):
        """Adapter to the ``model(x_t, t, control, class_ids)`` call shape."""

        def fn(x_t, t, control, class_ids=None):
            return self.forward(theta, x_t, t, control, class_ids)

        return fn


def _check_base(base: ParamSet, config: UNetConfig) -> None:
    ref = init_unet_params(config, 0, "base")
    if list(ref) != list(base):
        missing = sorted(set(ref) - set(base))[:3]
        extra = sorted(set(base) - set(ref))[:3]
        raise ConfigError(f"base parameters do not match config (missing {missing}, unexpected {extra})")
    for k in ref:
        if ref[k].shape != base[k].shape:
            raise ConfigError(f"{k}: shape {base[k].shape} does not match config shape {ref[k].shape}")


def hint_and_links(config: UNetConfig, seed: int) -> dict[str, np.ndarray]:
    """Small-random hint encoder and all-zero link convolutions."""
    rng = substream(seed, "init", 1)
    dtype = np.dtype(config.dtype)
    c = config.channels
    ch = c[0]
    out: dict[str, np.ndarray] = {}
    for name, (cin, cout) in (("conv1", (1, ch)), ("conv2", (ch, ch)), ("conv3", (ch, ch))):
        for k, v in _conv(rng, cout, cin, 3, dtype, gain=0.5).items():
            out[f"hint.{name}.{k}"] = v
    for k, name in enumerate(ENC_BLOCKS):
        out[f"zc.{name}.w"] = np.zeros((c[k], c[k], 1, 1), dtype=dtype)
        out[f"zc.{name}.b"] = np.zeros(c[k], dtype=dtype)
    out["zc.mid.w"] = np.zeros((c[3], c[3], 1, 1), dtype=dtype)
    out["zc.mid.b"] = np.zeros(c[3], dtype=dtype)
    return out


def attach_control_branch(base: ParamSet, config: UNetConfig, seed: int) -> ControlModel:
    """Clone the base encoder + middle block into ``ctrl.*`` and add zero links."""
    _check_base(base, config)
    clone = {}
    for path, arr in base.items():
        parts = path.split(".")
        if parts[1] in ENC_BLOCKS or parts[1] == "mid":
            clone["ctrl." + path[len("base.") :]] = arr.copy()
    theta = ParamSet({**clone, **hint_and_links(config, seed)})
    return ControlModel(config, base, theta)


def set_connection_policy(model: ControlModel, disconnected: Iterable[str]) -> ControlModel:
    """Drop the control signal into the given decoder inputs from the graph."""
    disconnected = frozenset(disconnected)
    unknown = disconnected - set(LINKS)
    if unknown:
        raise ValueError(f"unknown decoder connections {sorted(unknown)}; valid: {LINKS}")
    remaining = frozenset(LINKS) - disconnected
    if not remaining:
        raise ValueError("cannot disconnect every control path")
    return replace(model, connections=remaining, _base_tensors=model._base_tensors)
