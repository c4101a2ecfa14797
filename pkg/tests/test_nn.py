import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metacontrol import tensor as T
from metacontrol.nn import (
    ConfigError,
    FreezeMask,
    ParamSet,
    UNetConfig,
    block_io_channels,
    build_base_unet,
    decode,
    embed,
    encode,
    init_unet_params,
    named_blocks,
)
from metacontrol.tensor import Tensor

SMALL = UNetConfig(image_size=16, base_channels=4, channel_mult=(1, 2, 2, 2), time_embed_dim=8)


def test_spatial_sizes_halve_per_encoder_block():
    assert UNetConfig(32, 16, (1, 2, 2, 4)).spatial_sizes() == (32, 16, 8, 4)


@pytest.mark.parametrize("size", [0, 8, 24, 30])
def test_image_size_must_be_multiple_of_16(size):
    with pytest.raises(ConfigError):
        UNetConfig(image_size=size)


def test_same_seed_same_params():
    a = init_unet_params(SMALL, 3)
    b = init_unet_params(SMALL, 3)
    assert a.equal(b)
    assert not a.equal(init_unet_params(SMALL, 4))


def test_parameter_count_independent_of_seed():
    assert init_unet_params(SMALL, 0).total_count() == init_unet_params(SMALL, 99).total_count()


def test_forward_shape_32px():
    cfg = UNetConfig(32, 4, (1, 2, 2, 4), 8)
    params, forward = build_base_unet(cfg, 0)
    x = np.random.default_rng(0).standard_normal((2, 1, 32, 32)).astype(np.float32)
    assert forward(params, x, np.array([0, 150])).shape == (2, 1, 32, 32)


def test_encoder_skip_shapes_match_decoder_inputs():
    params = init_unet_params(SMALL, 0).tensors()
    x = Tensor(np.zeros((1, 1, 16, 16), dtype=np.float32))
    temb = embed(params, "base", np.array([3]), None, SMALL)
    skips, mid = encode(params, "base", x, temb)
    assert [s.shape[2] for s in skips] == [16, 8, 4, 2]
    assert [s.shape[1] for s in skips] == list(SMALL.channels)
    assert mid.shape[1:] == (SMALL.channels[3], 2, 2)
    io = block_io_channels(SMALL)
    for k in range(1, 5):
        assert io[f"dec{k}"][0] >= skips[k - 1].shape[1]


def test_zeroing_a_skip_changes_the_output():
    params = init_unet_params(SMALL, 1).tensors()
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((2, 1, 16, 16)).astype(np.float32))
    temb = embed(params, "base", np.array([10, 100]), None, SMALL)
    skips, mid = encode(params, "base", x, temb)
    ref = decode(params, "base", mid, skips, temb).data
    for k in range(4):
        cut = list(skips)
        cut[k] = Tensor(np.zeros_like(skips[k].data))
        assert np.abs(decode(params, "base", mid, cut, temb).data - ref).max() > 0


def test_class_embedding_changes_output():
    cfg = UNetConfig(16, 4, (1, 2, 2, 2), 8, class_count=4)
    params, forward = build_base_unet(cfg, 0)
    # class embedding starts random so different classes give different outputs
    x = np.zeros((2, 1, 16, 16), dtype=np.float32)
    out = forward(params, x, np.array([5, 5]), np.array([0, 3])).data
    assert not np.array_equal(out[0], out[1])


@settings(max_examples=10, deadline=None)
@given(
    size=st.sampled_from([16, 32]),
    width=st.integers(1, 4),
    mult=st.sampled_from([(1, 1, 1, 1), (1, 2, 2, 4), (1, 2, 3, 3)]),
)
def test_forward_shape_round_trip(size, width, mult):
    cfg = UNetConfig(size, width, mult, 4)
    params, forward = build_base_unet(cfg, 0)
    x = np.zeros((1, 1, size, size), dtype=np.float32)
    assert forward(params, x, np.array([7])).shape == x.shape


def test_named_blocks_examples():
    assert named_blocks(["base.enc4.conv1.w"]) == {"enc4": ["base.enc4.conv1.w"]}
    assert named_blocks(["ctrl.mid.norm.scale"]) == {"mid": ["ctrl.mid.norm.scale"]}
    with pytest.raises(KeyError):
        named_blocks(["base.nope.conv1.w"])
    with pytest.raises(KeyError):
        named_blocks(["w"])


def test_named_blocks_partition_is_total():
    paths = list(init_unet_params(SMALL, 0))
    parts = named_blocks(paths)
    flat = sorted(p for ps in parts.values() for p in ps)
    assert flat == sorted(paths)


def test_paramset_order_and_count():
    ps = ParamSet({"b.x": np.zeros(3), "a.y": np.ones((2, 2))})
    assert list(ps) == ["a.y", "b.x"]
    assert ps.total_count() == 7
    with pytest.raises(KeyError):
        ps.replace({"c": np.zeros(1)})
    with pytest.raises(KeyError):
        ParamSet([("a", np.zeros(1)), ("a", np.zeros(1))])


def test_paramset_digest_restricts_by_prefix():
    ps = ParamSet({"ctrl.enc4.w": np.ones(2), "ctrl.enc3.w": np.ones(2)})
    changed = ps.replace({"ctrl.enc3.w": np.zeros(2)})
    assert ps.digest(["ctrl.enc4"]) == changed.digest(["ctrl.enc4"])
    assert ps.digest() != changed.digest()


def test_freeze_mask_prefix_semantics():
    m = FreezeMask(["ctrl.enc4"])
    assert m.frozen("ctrl.enc4.conv1.w")
    assert m.frozen("ctrl.enc4")
    assert not m.frozen("ctrl.enc40.w")
    assert not m.frozen("zc.enc4.w")
    assert not any(FreezeMask().frozen(p) for p in init_unet_params(SMALL, 0))
    assert m.union(FreezeMask(["ctrl.mid"])).frozen("ctrl.mid.conv2.b")


def test_training_dtype_follows_config():
    assert all(v.dtype == np.float32 for v in init_unet_params(SMALL, 0).values())
    cfg64 = UNetConfig(16, 2, (1, 1, 1, 1), 4, dtype="float64")
    assert all(v.dtype == np.float64 for v in init_unet_params(cfg64, 0).values())


def test_forward_is_deterministic():
    params, forward = build_base_unet(SMALL, 5)
    x = np.random.default_rng(2).standard_normal((2, 1, 16, 16)).astype(np.float32)
    a = forward(params, x, np.array([1, 2])).data
    b = forward(params, x, np.array([1, 2])).data
    assert a.tobytes() == b.tobytes()


def test_backward_is_linear_in_the_loss():
    cfg = UNetConfig(16, 2, (1, 1, 1, 1), 4, dtype="float64")
    params, forward = build_base_unet(cfg, 0)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 1, 16, 16))
    w1, w2 = Tensor(rng.standard_normal((1, 1, 16, 16))), Tensor(rng.standard_normal((1, 1, 16, 16)))

    def grads(coef1, coef2):
        ts = params.tensors(lambda p: True)
        out = forward(ts, x, np.array([4]))
        loss = T.add(T.scale(T.sum_all(T.mul(out, w1)), coef1), T.scale(T.sum_all(T.mul(out, w2)), coef2))
        loss.backward()
        return {k: t.grad for k, t in ts.items()}

    g1, g2, gm = grads(1.0, 0.0), grads(0.0, 1.0), grads(2.0, -3.0)
    for k in g1:
        np.testing.assert_allclose(gm[k], 2.0 * g1[k] - 3.0 * g2[k], atol=1e-10, rtol=0)
