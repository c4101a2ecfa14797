"""Dense tensors with reverse-mode automatic differentiation.

Storage and kernels are numpy arrays; the differentiation graph, the
backward rules and the tape replay are implemented here. Only the ops a
small convolutional U-Net needs are provided.

Every op that touches a tensor requiring gradients records a node. Nodes
carry a monotonically increasing id, so sorting reachable nodes by id in
descending order is a valid reverse topological order and the replay is
deterministic.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "BackwardError",
    "no_grad",
    "tensor",
    "conv2d",
    "add",
    "mul",
    "scale",
    "silu",
    "concat_channels",
    "upsample2x",
    "avgpool2x",
    "scale_shift_norm",
    "linear",
    "mse_loss",
    "sum_all",
    "reshape",
]

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class BackwardError(RuntimeError):
    """Raised on an invalid backward call."""


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An n-dimensional array that may participate in a differentiation graph.

    ``data`` is never mutated by ops; only ``grad`` accumulates. A tensor
    with ``requires_grad`` and no parents is a leaf.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "_id", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_ids)
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    @property
    def grad(self) -> np.ndarray | None:
        """Accumulated gradient; zeros for a leaf that no loss reached."""
        if self._grad is None and self.requires_grad and self.is_leaf:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class GradTape:
    """The recorded operations reachable from a loss, in creation order.

    Building the tape walks the graph once; :meth:`replay` then visits the
    nodes in strict reverse topological order.
    """

    def __init__(self, loss: Tensor):
        seen: dict[int, Tensor] = {}
        stack = [loss]
        while stack:
            node = stack.pop()
            if node._id in seen or not node.requires_grad:
                continue
            seen[node._id] = node
            stack.extend(node._parents)
        self.entries: list[Tensor] = [seen[k] for k in sorted(seen)]
        self.loss = loss

    def replay(self) -> None:
        grads: dict[int, np.ndarray] = {self.loss._id: np.ones_like(self.loss.data)}
        for node in reversed(self.entries):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node.is_leaf:
                node._grad = g if node._grad is None else node._grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise ShapeError(f"backward rule produced {pg.shape}, expected {parent.data.shape}")
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg
        # release closures so intermediate buffers can be freed
        for node in self.entries:
            if not node.is_leaf:
                node._backward = _consumed_rule


def _consumed_rule(g):
    raise BackwardError("graph already consumed by a previous backward call")


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.data.ndim != 0:
        raise BackwardError(f"backward needs a 0-dimensional loss, got shape {loss.shape}")
    if loss._consumed:
        raise BackwardError("graph already consumed by a previous backward call")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        loss._grad = np.ones_like(loss.data)
        loss._consumed = True
        return
    tape = GradTape(loss)
    if any(node._backward is _consumed_rule for node in tape.entries):
        raise BackwardError("graph already consumed by a previous backward call")
    tape.replay()
    loss._consumed = True


# ---------------------------------------------------------------- elementwise


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_ok(a: Tensor, b: Tensor) -> bool:
    # bias/scalar cases only: b is a scalar, or a's trailing/channel dims with ones elsewhere
    if a.shape == b.shape or b.data.size == 1 or a.data.size == 1:
        return True
    if a.ndim != b.ndim:
        return False
    return all(x == y or y == 1 for x, y in zip(a.shape, b.shape)) or all(
        x == y or x == 1 for x, y in zip(a.shape, b.shape)
    )


def add(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b, a.dtype)
    if not _broadcast_ok(a, b):
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b, a.dtype)
    if not _broadcast_ok(a, b):
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def bw(g):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)

    return _make(out.astype(x.dtype, copy=False), (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


# ---------------------------------------------------------------- structural


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(old),))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    ref = tensors[0].shape
    for t in tensors:
        if t.ndim != 4:
            raise ShapeError(f"concat_channels: expected 4-d input, got {t.shape}")
        for ax, name in ((0, "N"), (2, "H"), (3, "W")):
            if t.shape[ax] != ref[ax]:
                raise ShapeError(f"concat_channels: dimension {name} differs ({t.shape[ax]} vs {ref[ax]})")
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=1)

    def bw(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(sizes)))

    return _make(out, tuple(tensors), bw)


def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of an NCHW tensor."""
    if a.ndim != 4:
        raise ShapeError(f"upsample2x: expected 4-d input, got {a.shape}")
    out = a.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = a.shape

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (a,), bw)


def avgpool2x(a: Tensor) -> Tensor:
    """2x2 average pooling with stride 2."""
    if a.ndim != 4:
        raise ShapeError(f"avgpool2x: expected 4-d input, got {a.shape}")
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2x: spatial dims must be even, got H={h}, W={w}")
    out = a.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return ((g * 0.25).repeat(2, axis=2).repeat(2, axis=3),)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------- layers


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    if not p:
        return a
    n, c, h, w = a.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=a.dtype)
    out[:, :, p : p + h, p : p + w] = a
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix of shape [kh*kw*C, N*ho*wo], rows ordered (i, j, c)."""
    n, c = xp.shape[:2]
    if kh == 1 and kw == 1 and stride == 1:
        return xp.transpose(1, 0, 2, 3).reshape(c, n * ho * wo)
    cols = np.empty((kh * kw, c, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[i * kw + j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride].transpose(1, 0, 2, 3)
    return cols.reshape(kh * kw * c, n * ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation over NCHW input with per-output-channel bias."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-d [N,Cin,H,W], got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-d [Cout,Cin,kH,kW], got {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: Cin mismatch, input has {cin} channels, weight expects {wcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias must have shape ({cout},), got {bias.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got kH={kh}, kW={kw}")
    if padding < 0 or stride < 1:
        raise ShapeError(f"conv2d: invalid padding={padding} / stride={stride}")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ShapeError(f"conv2d: H/W with padding {padding} not divisible by stride {stride}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel larger than padded input ({h}x{w})")

    cols = _im2col(_pad(x.data, padding), kh, kw, stride, ho, wo)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = wmat @ cols
    out += bias.data[:, None]
    out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias.requires_grad else None
        gx = None
        if x.requires_grad and stride == 1 and 2 * padding <= kh - 1 and kh == kw:
            # stride-1 input gradient is a full correlation with the flipped kernel
            q = kh - 1 - padding
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(cin, -1)
            gx = (wflip @ _im2col(_pad(g, q), kh, kw, 1, h, w)).reshape(cin, n, h, w).transpose(1, 0, 2, 3)
        elif x.requires_grad:
            dcols = (wmat.T @ g2).reshape(kh, kw, cin, n, ho, wo)
            gxp = np.zeros((cin, n, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3)
        return (None if gx is None else np.ascontiguousarray(gx)), gw, gb

    return _make(np.ascontiguousarray(out), (x, weight, bias), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for x of shape [N, in] and weight [out, in]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear: expected 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: in-features mismatch, input {x.shape[1]} vs weight {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias must have shape ({weight.shape[0]},), got {bias.shape}")
    xd, wd = x.data, weight.data

    def bw(g):
        return (
            g @ wd if x.requires_grad else None,
            g.T @ xd if weight.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return _make(xd @ wd.T + bias.data, (x, weight, bias), bw)


def scale_shift_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) normalization over H, W followed by a learned
    per-channel scale and shift (group norm with one channel per group)."""
    if x.ndim != 4:
        raise ShapeError(f"scale_shift_norm: expected 4-d input, got {x.shape}")
    c = x.shape[1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"scale_shift_norm: channel dimension C={c} does not match scale/shift {gain.shape}")
    xd = x.data
    mu = xd.mean(axis=(2, 3), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data.reshape(1, c, 1, 1)
    out = xhat * gd + shift.data.reshape(1, c, 1, 1)

    def bw(g):
        ggain = (g * xhat).sum(axis=(0, 2, 3)) if gain.requires_grad else None
        gshift = g.sum(axis=(0, 2, 3)) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=(2, 3), keepdims=True) - xhat * (gh * xhat).mean(axis=(2, 3), keepdims=True))
        return gx, ggain, gshift

    return _make(out.astype(xd.dtype, copy=False), (x, gain, shift), bw)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences, reduced to a 0-d tensor."""
    target = _as_tensor(target, pred.dtype)
    _check_same(pred, target, "mse_loss")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)

    def bw(g):
        gp = diff * (2.0 * g / n)
        return gp, -gp

    return _make(out, (pred, target), bw)
