"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"MCNC"  u32 format-version
    u32 n  config blob      (UTF-8 ``key=value`` lines, sorted)
    u32 n  RNG state        (UTF-8 ``key=value`` lines)
    u32 n  optimizer header (UTF-8 ``kind=...`` / ``count=...``)
    tensor table of optimizer moments
    tensor table of parameters
    32-byte SHA-256 of every preceding byte

A tensor table is ``u32 count`` followed by entries of ``u32 name-len,
name, u32 ndim, u64 dims..., u8 dtype (0 f32, 1 f64), raw data``, in
sorted name order. Unknown versions are refused.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MCNC"
FORMAT_VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    """Corrupt, truncated or unsupported checkpoint."""


@dataclass
class Checkpoint:
    config: dict[str, str]
    tensors: dict[str, np.ndarray]
    rng_state: str = ""
    optimizer_kind: str = "none"
    optimizer_count: int = 0
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)

    def digest(self) -> str:
        """Short id derived from the encoded bytes."""
        return hashlib.sha256(encode(self)).hexdigest()[:16]


def _kv_text(pairs: Mapping[str, str]) -> str:
    lines = []
    for k in sorted(pairs):
        v = str(pairs[k])
        if "\n" in k or "=" in k or "\n" in v:
            raise ValueError(f"config entry {k!r} cannot be stored as a key=value line")
        lines.append(f"{k}={v}\n")
    return "".join(lines)


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise CheckpointError(f"malformed config line {line!r}")
        k, v = line.split("=", 1)
        out[k] = v
    return out


def _blob(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _table(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise ValueError(f"{name}: dtype {arr.dtype} is not storable (float32/float64 only)")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<I", arr.ndim) + b"".join(struct.pack("<Q", d) for d in arr.shape))
        parts.append(struct.pack("<B", DTYPE_CODES[dt]))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def encode(ckpt: Checkpoint) -> bytes:
    body = b"".join(
        [
            MAGIC,
            struct.pack("<I", FORMAT_VERSION),
            _blob(_kv_text(ckpt.config)),
            _blob(ckpt.rng_state),
            _blob(_kv_text({"kind": ckpt.optimizer_kind, "count": str(ckpt.optimizer_count)})),
            _table(ckpt.optimizer_state),
            _table(ckpt.tensors),
        ]
    )
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"invalid UTF-8 in checkpoint: {exc}") from None

    def table(self) -> dict[str, np.ndarray]:
        out = {}
        for _ in range(self.u32()):
            name = self.take(self.u32()).decode("utf-8")
            ndim = self.u32()
            shape = tuple(struct.unpack("<Q", self.take(8))[0] for _ in range(ndim))
            code = self.take(1)[0]
            if code not in CODE_DTYPES:
                raise CheckpointError(f"{name}: unknown dtype code {code}")
            dt = CODE_DTYPES[code]
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(shape)
            out[name] = arr.astype(dt.newbyteorder("="), copy=True)
        return out


def decode(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 4 + 32:
        raise CheckpointError("file too short to be a checkpoint")
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version = struct.unpack("<I", data[4:8])[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version} (this build reads {FORMAT_VERSION})")
    body, tail = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != tail:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt")
    r = _Reader(body)
    r.pos = 8
    config = _parse_kv(r.text())
    rng_state = r.text()
    opt = _parse_kv(r.text())
    opt_state = r.table()
    tensors = r.table()
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes before checksum")
    try:
        count = int(opt.get("count", "0"))
    except ValueError:
        raise CheckpointError(f"bad optimizer count {opt.get('count')!r}") from None
    return Checkpoint(config, tensors, rng_state, opt.get("kind", "none"), count, opt_state)


def save(path, ckpt: Checkpoint) -> bytes:
    """Write atomically (temp file + rename); returns the bytes written."""
    data = encode(ckpt)
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return data


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())
