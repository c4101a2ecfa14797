import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metacontrol import tensor as T
from metacontrol.gradcheck import check
from metacontrol.tensor import BackwardError, ShapeError, Tensor

SEEDS = range(10)


def rand(rng, *shape):
    return rng.standard_normal(shape)


# op name -> (builder, input factory)
OPS = {
    "add": (lambda ts: T.add(ts[0], ts[1]), lambda r: [rand(r, 2, 3, 4, 4), rand(r, 2, 3, 4, 4)]),
    "add-bias": (lambda ts: T.add(ts[0], ts[1]), lambda r: [rand(r, 2, 3, 4, 4), rand(r, 2, 3, 1, 1)]),
    "mul": (lambda ts: T.mul(ts[0], ts[1]), lambda r: [rand(r, 3, 5), rand(r, 3, 5)]),
    "mul-scalar-tensor": (lambda ts: T.mul(ts[0], ts[1]), lambda r: [rand(r, 3, 5), rand(r)]),
    "scale": (lambda ts: T.scale(ts[0], -1.7), lambda r: [rand(r, 4, 3)]),
    "silu": (lambda ts: T.silu(ts[0]), lambda r: [rand(r, 2, 3, 5) * 3]),
    "sum_all": (lambda ts: T.sum_all(ts[0]), lambda r: [rand(r, 3, 4)]),
    "reshape": (lambda ts: T.reshape(ts[0], (6, 4)), lambda r: [rand(r, 2, 3, 4)]),
    "concat": (lambda ts: T.concat_channels([ts[0], ts[1]]), lambda r: [rand(r, 2, 2, 4, 4), rand(r, 2, 3, 4, 4)]),
    "upsample2x": (lambda ts: T.upsample2x(ts[0]), lambda r: [rand(r, 2, 3, 4, 4)]),
    "avgpool2x": (lambda ts: T.avgpool2x(ts[0]), lambda r: [rand(r, 2, 3, 4, 4)]),
    "linear": (lambda ts: T.linear(ts[0], ts[1], ts[2]), lambda r: [rand(r, 3, 5), rand(r, 4, 5), rand(r, 4)]),
    "scale_shift_norm": (
        lambda ts: T.scale_shift_norm(ts[0], ts[1], ts[2]),
        lambda r: [rand(r, 2, 3, 4, 4) * 2 + 0.5, rand(r, 3), rand(r, 3)],
    ),
    "mse_loss": (lambda ts: T.mse_loss(ts[0], ts[1]), lambda r: [rand(r, 2, 3), rand(r, 2, 3)]),
    "conv3x3": (lambda ts: T.conv2d(ts[0], ts[1], ts[2], 1, 1), lambda r: [rand(r, 2, 3, 6, 6), rand(r, 4, 3, 3, 3), rand(r, 4)]),
    "conv3x3-valid": (lambda ts: T.conv2d(ts[0], ts[1], ts[2], 1, 0), lambda r: [rand(r, 2, 2, 6, 6), rand(r, 3, 2, 3, 3), rand(r, 3)]),
    "conv3x3-stride2": (lambda ts: T.conv2d(ts[0], ts[1], ts[2], 2, 1), lambda r: [rand(r, 2, 2, 7, 7), rand(r, 3, 2, 3, 3), rand(r, 3)]),
    "conv1x1": (lambda ts: T.conv2d(ts[0], ts[1], ts[2], 1, 0), lambda r: [rand(r, 2, 3, 5, 5), rand(r, 4, 3, 1, 1), rand(r, 4)]),
    "conv5x5": (lambda ts: T.conv2d(ts[0], ts[1], ts[2], 1, 2), lambda r: [rand(r, 1, 2, 6, 6), rand(r, 2, 2, 5, 5), rand(r, 2)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", SEEDS)
def test_op_gradient_matches_finite_differences(name, seed):
    build, make = OPS[name]
    rng = np.random.default_rng(seed)
    assert check(build, make(rng), seed=seed) < 1e-4


def test_chain_rule_through_shared_subexpression():
    # y = x*x + x  ->  dy/dx = 2x + 1, with x reached along two paths
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = T.sum_all(T.add(T.mul(x, x), x))
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_silu_known_values():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    T.sum_all(T.silu(x)).backward()
    s1 = 1 / (1 + np.exp(-1.0))
    np.testing.assert_allclose(x.grad, [0.5, s1 * (1 + 1.0 * (1 - s1))])


def test_double_backward_is_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = T.sum_all(T.mul(x, x))
    loss.backward()
    with pytest.raises(BackwardError):
        loss.backward()


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises((BackwardError, ShapeError)):
        T.scale(x, 2.0).backward()


def test_unreached_leaf_reports_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    T.sum_all(x).backward()
    np.testing.assert_array_equal(unused.grad, np.zeros((2, 2)))


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y.is_leaf


def test_gradients_accumulate_over_separate_graphs():
    x = Tensor(np.array([2.0]), requires_grad=True)
    T.sum_all(T.scale(x, 3.0)).backward()
    T.sum_all(T.scale(x, 4.0)).backward()
    np.testing.assert_allclose(x.grad, [7.0])


def test_conv_shape_errors_name_the_dimension():
    x = Tensor(np.zeros((1, 3, 8, 8)))
    with pytest.raises(ShapeError, match="channel|Cin|in"):
        T.conv2d(x, Tensor(np.zeros((2, 4, 3, 3))), Tensor(np.zeros(2)))
    with pytest.raises(ShapeError):
        T.conv2d(x, Tensor(np.zeros((2, 3, 2, 2))), Tensor(np.zeros(2)))
    with pytest.raises(ShapeError):  # (8 + 2 - 3) not divisible by 2
        T.conv2d(x, Tensor(np.zeros((2, 3, 3, 3))), Tensor(np.zeros(2)), stride=2, padding=1)


def test_conv_matches_direct_sum():
    rng = np.random.default_rng(3)
    x, w, b = rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.empty_like(out)
    for i in range(5):
        for j in range(5):
            ref[:, :, i, j] = np.einsum("ncij,ocij->no", xp[:, :, i : i + 3, j : j + 3], w) + b
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_float32_stays_float32():
    x = Tensor(np.ones((1, 1, 4, 4), dtype=np.float32), requires_grad=True)
    w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32), requires_grad=True)
    y = T.conv2d(x, w, Tensor(np.zeros(1, dtype=np.float32)), 1, 1)
    assert y.dtype == np.float32
    T.sum_all(y).backward()
    assert x.grad.dtype == np.float32 and w.grad.dtype == np.float32


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(1, 2),
    c=st.integers(1, 3),
    half=st.integers(1, 4),
)
def test_pool_then_upsample_preserves_block_means(n, c, half):
    rng = np.random.default_rng(n * 100 + c * 10 + half)
    x = rng.standard_normal((n, c, 2 * half, 2 * half))
    pooled = T.avgpool2x(Tensor(x)).data
    up = T.upsample2x(Tensor(pooled)).data
    np.testing.assert_allclose(T.avgpool2x(Tensor(up)).data, pooled, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(shape=st.lists(st.integers(1, 4), min_size=1, max_size=3), seed=st.integers(0, 2**16))
def test_add_mul_commute(shape, seed):
    rng = np.random.default_rng(seed)
    a, b = Tensor(rng.standard_normal(shape)), Tensor(rng.standard_normal(shape))
    np.testing.assert_array_equal(T.add(a, b).data, T.add(b, a).data)
    np.testing.assert_array_equal(T.mul(a, b).data, T.mul(b, a).data)
