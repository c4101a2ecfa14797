"""Parameter containers, freeze masks and the toy denoising U-Net.

The U-Net has four encoder blocks, one middle block and four decoder
blocks. Each block is conv -> norm -> (+time embedding) -> silu -> conv ->
norm -> silu. Encoder blocks 2-4 average-pool their input first; decoder
blocks 3-1 upsample theirs and concatenate the matching encoder skip.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from . import tensor as T
from .rng import substream
from .tensor import Tensor

ENC_BLOCKS = ("enc1", "enc2", "enc3", "enc4")
DEC_BLOCKS = ("dec1", "dec2", "dec3", "dec4")
BLOCK_NAMES = ENC_BLOCKS + ("mid",) + DEC_BLOCKS + ("embed", "head")
# control-branch only groups
EXTRA_GROUPS = ("hint", "zc")


class ConfigError(ValueError):
    pass


class ParamSet(Mapping[str, np.ndarray]):
    """Immutable mapping from hierarchical path to parameter array.

    Iteration is lexicographic by path. Updates return a new ParamSet.
    """

    def __init__(self, items: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]] = ()):
        pairs = items.items() if isinstance(items, Mapping) else items
        d: dict[str, np.ndarray] = {}
        for k, v in pairs:
            if k in d:
                raise KeyError(f"duplicate parameter path {k!r}")
            d[k] = np.asarray(v)
        self._d = {k: d[k] for k in sorted(d)}

    def __getitem__(self, path: str) -> np.ndarray:
        return self._d[path]

    def __iter__(self) -> Iterator[str]:
        return iter(self._d)

    def __len__(self) -> int:
        return len(self._d)

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} tensors, {self.total_count()} values)"

    def total_count(self) -> int:
        return int(sum(v.size for v in self._d.values()))

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParamSet":
        unknown = set(updates) - set(self._d)
        if unknown:
            raise KeyError(f"unknown parameter paths {sorted(unknown)}")
        return ParamSet({**self._d, **updates})

    def merge(self, other: Mapping[str, np.ndarray]) -> "ParamSet":
        return ParamSet(list(self._d.items()) + list(other.items()))

    def with_prefix(self, prefix: str) -> "ParamSet":
        return ParamSet({k: v for k, v in self._d.items() if _under(k, prefix)})

    def rename_prefix(self, old: str, new: str) -> "ParamSet":
        return ParamSet({new + k[len(old) :] if _under(k, old) else k: v for k, v in self._d.items()})

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({k: v.astype(dtype) for k, v in self._d.items()})

    def digest(self, prefixes: Sequence[str] | None = None) -> str:
        """SHA-256 over path names and raw bytes, optionally restricted."""
        h = hashlib.sha256()
        for k, v in self._d.items():
            if prefixes is not None and not any(_under(k, p) for p in prefixes):
                continue
            h.update(k.encode("utf-8"))
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def equal(self, other: Mapping[str, np.ndarray]) -> bool:
        """Bitwise equality of paths, dtypes and values."""
        if list(self) != sorted(other):
            return False
        return all(
            self._d[k].dtype == other[k].dtype and self._d[k].tobytes() == np.asarray(other[k]).tobytes()
            for k in self._d
        )

    def tensors(self, trainable: Callable[[str], bool] | None = None) -> dict[str, Tensor]:
        """Wrap every array as a Tensor; leaves for which ``trainable`` is true require grad."""
        return {k: Tensor(v, requires_grad=bool(trainable and trainable(k))) for k, v in self._d.items()}


def _under(path: str, prefix: str) -> bool:
    return path == prefix or path.startswith(prefix + ".")


@dataclass(frozen=True)
class FreezeMask:
    """Paths under any of ``prefixes`` are exempt from updates."""

    prefixes: frozenset[str] = field(default_factory=frozenset)

    def __init__(self, prefixes: Iterable[str] = ()):
        object.__setattr__(self, "prefixes", frozenset(prefixes))

    def frozen(self, path: str) -> bool:
        return any(_under(path, p) for p in self.prefixes)

    def trainable(self, path: str) -> bool:
        return not self.frozen(path)

    def frozen_paths(self, params: Iterable[str]) -> list[str]:
        return [p for p in params if self.frozen(p)]

    def union(self, other: "FreezeMask") -> "FreezeMask":
        return FreezeMask(self.prefixes | other.prefixes)


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 32
    base_channels: int = 16
    channel_mult: tuple[int, ...] = (1, 2, 2, 4)
    time_embed_dim: int = 64
    class_count: int | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if len(self.channel_mult) != 4:
            raise ConfigError(f"channel_mult needs 4 entries (one per encoder block), got {self.channel_mult}")
        if self.image_size < 16 or self.image_size % 16:
            raise ConfigError(f"image_size must be a positive multiple of 16, got {self.image_size}")
        if self.base_channels < 1 or self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError("base_channels must be >= 1 and time_embed_dim a positive even number")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.class_count is not None and self.class_count < 1:
            raise ConfigError("class_count must be positive when given")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_mult)

    def spatial_sizes(self) -> tuple[int, ...]:
        """Encoder block output sizes; the middle block runs at the last."""
        return tuple(self.image_size >> k for k in range(4))


# ---------------------------------------------------------------- init


def _conv(rng, cout, cin, k, dtype, gain=1.0):
    fan_in = cin * k * k
    w = rng.standard_normal((cout, cin, k, k)) * (gain / math.sqrt(fan_in))
    return {"w": w.astype(dtype), "b": np.zeros(cout, dtype=dtype)}


def _lin(rng, cout, cin, dtype, gain=1.0):
    w = rng.standard_normal((cout, cin)) * (gain / math.sqrt(cin))
    return {"w": w.astype(dtype), "b": np.zeros(cout, dtype=dtype)}


def _norm(c, dtype):
    return {"scale": np.ones(c, dtype=dtype), "shift": np.zeros(c, dtype=dtype)}


def _block_params(rng, prefix, cin, cout, temb_dim, dtype) -> dict[str, np.ndarray]:
    parts = {
        "conv1": _conv(rng, cout, cin, 3, dtype),
        "norm1": _norm(cout, dtype),
        "temb": _lin(rng, cout, temb_dim, dtype),
        "conv2": _conv(rng, cout, cout, 3, dtype),
        "norm2": _norm(cout, dtype),
    }
    return {f"{prefix}.{layer}.{name}": arr for layer, d in parts.items() for name, arr in d.items()}


def block_io_channels(config: UNetConfig) -> dict[str, tuple[int, int]]:
    c = config.channels
    io = {"enc1": (1, c[0])}
    for k in range(1, 4):
        io[f"enc{k + 1}"] = (c[k - 1], c[k])
    io["mid"] = (c[3], c[3])
    io["dec4"] = (c[3] + c[3], c[3])
    for k in (3, 2, 1):
        io[f"dec{k}"] = (c[k] + c[k - 1], c[k - 1])
    return io


def init_unet_params(config: UNetConfig, seed: int, prefix: str = "base") -> ParamSet:
    rng = substream(seed, "init", 0)
    dtype = np.dtype(config.dtype)
    d = config.time_embed_dim
    out: dict[str, np.ndarray] = {}
    for name, (cin, cout) in block_io_channels(config).items():
        out.update(_block_params(rng, f"{prefix}.{name}", cin, cout, d, dtype))
    for layer, shape in (("lin1", (d, d)), ("lin2", (d, d))):
        for k, v in _lin(rng, shape[0], shape[1], dtype).items():
            out[f"{prefix}.embed.{layer}.{k}"] = v
    if config.class_count:
        out[f"{prefix}.embed.class.w"] = (rng.standard_normal((d, config.class_count)) * 0.5).astype(dtype)
    for k, v in _conv(rng, 1, config.channels[0], 3, dtype, gain=0.5).items():
        out[f"{prefix}.head.{k}"] = v
    return ParamSet(out)


# ---------------------------------------------------------------- forward


def timestep_embedding(t: np.ndarray, dim: int, dtype) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape [N, dim]."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


def _p(params: Mapping[str, Tensor], path: str) -> Tensor:
    try:
        return params[path]
    except KeyError:
        raise KeyError(f"missing parameter {path!r}") from None


def embed(params, prefix: str, t: np.ndarray, class_ids, config: UNetConfig) -> Tensor:
    dtype = np.dtype(config.dtype)
    e = Tensor(timestep_embedding(t, config.time_embed_dim, dtype))
    if config.class_count and class_ids is not None:
        ids = np.asarray(class_ids).reshape(-1)
        if ids.min() < 0 or ids.max() >= config.class_count:
            raise ValueError(f"class id out of range [0, {config.class_count})")
        onehot = np.zeros((len(ids), config.class_count), dtype=dtype)
        onehot[np.arange(len(ids)), ids] = 1.0
        cw = _p(params, f"{prefix}.embed.class.w")
        zero_b = Tensor(np.zeros(config.time_embed_dim, dtype=dtype))
        e = T.add(e, T.linear(Tensor(onehot), cw, zero_b))
    h = T.linear(e, _p(params, f"{prefix}.embed.lin1.w"), _p(params, f"{prefix}.embed.lin1.b"))
    h = T.silu(h)
    h = T.linear(h, _p(params, f"{prefix}.embed.lin2.w"), _p(params, f"{prefix}.embed.lin2.b"))
    return T.silu(h)


def block(params, prefix: str, x: Tensor, temb: Tensor, inject: Tensor | None = None) -> Tensor:
    """One conv block; ``inject`` (if given) is added right after the first conv."""
    h = T.conv2d(x, _p(params, f"{prefix}.conv1.w"), _p(params, f"{prefix}.conv1.b"), 1, 1)
    if inject is not None:
        h = T.add(h, inject)
    h = T.scale_shift_norm(h, _p(params, f"{prefix}.norm1.scale"), _p(params, f"{prefix}.norm1.shift"))
    tp = T.linear(temb, _p(params, f"{prefix}.temb.w"), _p(params, f"{prefix}.temb.b"))
    h = T.add(h, T.reshape(tp, (tp.shape[0], tp.shape[1], 1, 1)))
    h = T.silu(h)
    h = T.conv2d(h, _p(params, f"{prefix}.conv2.w"), _p(params, f"{prefix}.conv2.b"), 1, 1)
    h = T.scale_shift_norm(h, _p(params, f"{prefix}.norm2.scale"), _p(params, f"{prefix}.norm2.shift"))
    return T.silu(h)


def encode(params, prefix: str, x: Tensor, temb: Tensor, hint: Tensor | None = None) -> tuple[list[Tensor], Tensor]:
    """Run enc1..enc4 and mid; returns (encoder outputs, middle output)."""
    skips = []
    h = x
    for k, name in enumerate(ENC_BLOCKS):
        if k:
            h = T.avgpool2x(h)
        h = block(params, f"{prefix}.{name}", h, temb, inject=hint if k == 0 else None)
        skips.append(h)
    mid = block(params, f"{prefix}.mid", h, temb)
    return skips, mid


def decode(
    params,
    prefix: str,
    mid: Tensor,
    skips: Sequence[Tensor],
    temb: Tensor,
    skip_residuals: Mapping[str, Tensor] | None = None,
) -> Tensor:
    """Run dec4..dec1 and the output head.

    ``skip_residuals`` maps "mid" / "dec1".."dec4" to tensors added to the
    middle output or to the matching skip before concatenation.
    """
    res = skip_residuals or {}
    h = mid
    if "mid" in res:
        h = T.add(h, res["mid"])
    for k in (4, 3, 2, 1):
        if k < 4:
            h = T.upsample2x(h)
        skip = skips[k - 1]
        if f"dec{k}" in res:
            skip = T.add(skip, res[f"dec{k}"])
        h = block(params, f"{prefix}.dec{k}", T.concat_channels([h, skip]), temb)
    return T.conv2d(h, _p(params, f"{prefix}.head.w"), _p(params, f"{prefix}.head.b"), 1, 1)


def unet_forward(params, config: UNetConfig, x_t: Tensor, t, class_ids=None, prefix: str = "base") -> Tensor:
    if not isinstance(x_t, Tensor):
        x_t = Tensor(np.asarray(x_t, dtype=config.dtype))
    if x_t.ndim != 4 or x_t.shape[1] != 1 or x_t.shape[2:] != (config.image_size,) * 2:
        raise T.ShapeError(f"expected input [N,1,{config.image_size},{config.image_size}], got {x_t.shape}")
    temb = embed(params, prefix, t, class_ids, config)
    skips, mid = encode(params, prefix, x_t, temb)
    return decode(params, prefix, mid, skips, temb)


ForwardFn = Callable[..., Tensor]


def build_base_unet(config: UNetConfig, seed: int) -> tuple[ParamSet, ForwardFn]:
    """Initialize the base U-Net; returns its parameters and a forward function.

    ``forward(params, x_t, t, class_ids=None)`` accepts a ParamSet or a
    mapping of path to Tensor and predicts the noise in ``x_t``.
    """
    params = init_unet_params(config, seed, "base")

    def forward(p, x_t, t, class_ids=None):
        if isinstance(p, ParamSet):
            p = p.tensors()
        if not isinstance(x_t, Tensor):
            x_t = Tensor(np.asarray(x_t, dtype=config.dtype))
        return unet_forward(p, config, x_t, t, class_ids, "base")

    return params, forward


def named_blocks(params: Iterable[str]) -> dict[str, list[str]]:
    """Partition parameter paths into blocks by their second path component."""
    out: dict[str, list[str]] = {}
    for path in params:
        parts = path.split(".")
        if len(parts) < 3:
            raise KeyError(f"unknown parameter path {path!r}")
        if parts[0] in ("base", "ctrl") and parts[1] in BLOCK_NAMES:
            name = parts[1]
        elif parts[0] in EXTRA_GROUPS:
            name = parts[0]
        else:
            raise KeyError(f"unknown parameter path {path!r}")
        out.setdefault(name, []).append(path)
    return out


def block_of(path: str) -> str:
    (name,) = named_blocks([path])
    return name
