"""Named random sub-streams derived from one 64-bit seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "init", "training", "sampling", "eval")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name`` under ``seed``.

    The same (seed, name, extra) always yields the same stream, and
    streams with different names do not overlap.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    key.extend(int(e) for e in extra)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def generator_state(rng: np.random.Generator) -> str:
    """Serialize a PCG64 generator state as key=value lines."""
    st = rng.bit_generator.state
    return "\n".join(
        [
            f"bit_generator={st['bit_generator']}",
            f"state={st['state']['state']}",
            f"inc={st['state']['inc']}",
            f"has_uint32={st['has_uint32']}",
            f"uinteger={st['uinteger']}",
        ]
    )


def restore_generator(text: str) -> np.random.Generator:
    kv = dict(line.split("=", 1) for line in text.splitlines() if line)
    if kv.get("bit_generator") != "PCG64":
        raise ValueError(f"unsupported bit generator {kv.get('bit_generator')!r}")
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(kv["state"]), "inc": int(kv["inc"])},
        "has_uint32": int(kv["has_uint32"]),
        "uinteger": int(kv["uinteger"]),
    }
    return np.random.Generator(bg)
