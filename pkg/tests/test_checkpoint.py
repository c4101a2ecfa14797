import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from metacontrol.checkpoint import FORMAT_VERSION, Checkpoint, CheckpointError, decode, encode, load, save


def _sample():
    return Checkpoint(
        config={"seed": "3", "meta.freeze": "enc4mid"},
        tensors={"b.w": np.arange(6, dtype=np.float32).reshape(2, 3), "a.b": np.array([0.5, -1.25])},
        rng_state="state=1\n",
        optimizer_kind="adaptive-moment",
        optimizer_count=7,
        optimizer_state={"m/a.b": np.array([1.0, 2.0]), "v/a.b": np.array([3.0, 4.0])},
    )


def _oracle_table(entries):
    out = struct.pack("<I", len(entries))
    for name, shape, code, raw in entries:
        out += struct.pack("<I", len(name)) + name.encode() + struct.pack("<I", len(shape))
        out += b"".join(struct.pack("<Q", d) for d in shape) + bytes([code]) + raw
    return out


def test_encoding_matches_hand_built_bytes():
    ck = _sample()
    blob = lambda s: struct.pack("<I", len(s.encode())) + s.encode()
    body = b"MCNC" + struct.pack("<I", 1)
    body += blob("meta.freeze=enc4mid\nseed=3\n") + blob("state=1\n") + blob("count=7\nkind=adaptive-moment\n")
    body += _oracle_table(
        [
            ("m/a.b", (2,), 1, struct.pack("<2d", 1.0, 2.0)),
            ("v/a.b", (2,), 1, struct.pack("<2d", 3.0, 4.0)),
        ]
    )
    body += _oracle_table(
        [
            ("a.b", (2,), 1, struct.pack("<2d", 0.5, -1.25)),
            ("b.w", (2, 3), 0, struct.pack("<6f", *range(6))),
        ]
    )
    assert encode(ck) == body + hashlib.sha256(body).digest()


def test_round_trip_is_bitwise(tmp_path):
    ck = _sample()
    first = save(tmp_path / "a.mcnc", ck)
    back = load(tmp_path / "a.mcnc")
    assert back.config == ck.config and back.rng_state == ck.rng_state
    assert back.optimizer_kind == "adaptive-moment" and back.optimizer_count == 7
    for k, v in ck.tensors.items():
        assert back.tensors[k].dtype == v.dtype and back.tensors[k].tobytes() == v.tobytes()
    assert save(tmp_path / "b.mcnc", back) == first
    assert not (tmp_path / "a.mcnc.tmp").exists()


def test_unknown_version_is_refused():
    data = bytearray(encode(_sample()))
    data[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
    body = bytes(data[:-32])
    with pytest.raises(CheckpointError, match="version"):
        decode(body + hashlib.sha256(body).digest())


def test_bad_magic_corruption_and_truncation_are_detected():
    data = encode(_sample())
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"XXXX" + data[4:])
    flipped = bytearray(data)
    flipped[40] ^= 1
    with pytest.raises(CheckpointError, match="checksum"):
        decode(bytes(flipped))
    with pytest.raises(CheckpointError):
        decode(data[:-5])
    with pytest.raises(CheckpointError):
        decode(b"MC")


def test_missing_file_is_a_path_error(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.mcnc"):
        load(tmp_path / "nope.mcnc")


def test_unstorable_entries_are_rejected():
    with pytest.raises(ValueError):
        encode(Checkpoint({}, {"x": np.arange(3)}))
    with pytest.raises(ValueError):
        encode(Checkpoint({"k": "two\nlines"}, {}))


_arrays = hnp.arrays(
    dtype=st.sampled_from([np.float32, np.float64]),
    shape=hnp.array_shapes(min_dims=0, max_dims=4, max_side=4),
    elements=st.floats(allow_nan=False, width=32),
)


@settings(max_examples=40, deadline=None)
@given(
    tensors=st.dictionaries(st.from_regex(r"[a-z]{1,6}(\.[a-z0-9]{1,4}){0,3}", fullmatch=True), _arrays, max_size=5),
    config=st.dictionaries(st.from_regex(r"[a-z][a-z.\-]{0,10}", fullmatch=True), st.from_regex(r"[ -~]{0,12}", fullmatch=True), max_size=5),
    rng_state=st.text(max_size=40),
)
def test_decode_inverts_encode(tensors, config, rng_state):
    ck = Checkpoint(config, tensors, rng_state)
    data = encode(ck)
    back = decode(data)
    assert back.config == {k: v for k, v in config.items()}
    assert back.rng_state == rng_state
    assert sorted(back.tensors) == sorted(tensors)
    for k, v in tensors.items():
        assert back.tensors[k].shape == v.shape and back.tensors[k].tobytes() == v.tobytes()
    assert encode(back) == data
