"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .diffusion import NonFiniteError
from .nn import ParamSet
from .tensor import Tensor, mul, sum_all

# error floor as a fraction of the largest analytic gradient in the whole check;
# gradients that are exactly zero in theory (e.g. a conv bias feeding a norm)
# are then compared on the scale of the function instead of on round-off
FLOOR = 1e-3


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6, index=None) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place.

    ``index`` restricts the check to some flat positions (others stay 0).
    """
    out = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    positions = range(flat.size) if index is None else index
    for i in positions:
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray, index=None, scale: float | None = None) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, FLOOR * scale).

    ``scale`` defaults to the largest |n| among the compared entries.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if index is not None:
        a, n = a[list(index)], n[list(index)]
    if a.size == 0:
        return 0.0
    if scale is None:
        scale = float(np.abs(n).max())
    scale = max(scale, 1e-12)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR * scale)
    return float(np.max(np.abs(a - n) / den))


def check(
    build: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[np.ndarray],
    seed: int = 0,
    eps: float = 1e-6,
    max_entries: int | None = None,
) -> float:
    """Max relative error between backward() and finite differences.

    Non-scalar outputs are reduced with a fixed random projection. At most
    ``max_entries`` randomly chosen positions per input are differentiated
    numerically.
    """
    # separate stream so the projection is independent of test inputs drawn from ``seed``
    rng = np.random.default_rng([seed, 0x6772])
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    probe = build([Tensor(a) for a in arrays])
    weights = Tensor(rng.standard_normal(probe.shape)) if probe.data.ndim else None

    def scalar(ts):
        out = build(ts)
        return out if weights is None else sum_all(mul(out, weights))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    scalar(leaves).backward()
    scale = max(float(np.abs(t.grad).max()) for t in leaves)
    worst = 0.0
    for k, a in enumerate(arrays):
        index = None
        if max_entries is not None and a.size > max_entries:
            index = sorted(rng.choice(a.size, max_entries, replace=False).tolist())

        def f():
            return float(scalar([Tensor(x) for x in arrays]).data)

        num = numeric_grad(f, a, eps, index)
        worst = max(worst, rel_error(leaves[k].grad, num, index, scale))
    return worst


def grad_check(
    function: Callable[[Mapping[str, Tensor]], Tensor],
    params: ParamSet,
    epsilon: float = 1e-6,
    seed: int = 0,
    max_elements: int = 10_000,
) -> float:
    """Max relative error of backward() against central differences for a
    scalar ``function`` of every parameter in ``params``.

    Above ``max_elements`` total values a seeded random subsample of
    positions is checked. Non-finite values raise NonFiniteError naming
    the parameter path.
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError(f"epsilon must be in (0, 1e-2], got {epsilon}")
    arrays = {p: np.array(v) for p, v in params.items()}
    leaves = {p: Tensor(a, requires_grad=True) for p, a in arrays.items()}
    loss = function(leaves)
    if not np.isfinite(loss.data):
        raise NonFiniteError("non-finite function value at the given parameters")
    loss.backward()
    for p, t in leaves.items():
        if not np.all(np.isfinite(t.grad)):
            raise NonFiniteError(f"non-finite gradient for {p}")
    scale = max(float(np.abs(t.grad).max()) for t in leaves.values())

    paths = list(arrays)
    sizes = np.array([arrays[p].size for p in paths])
    total = int(sizes.sum())
    chosen: dict[str, list[int] | None] = {p: None for p in paths}
    if total > max_elements:
        flat = np.sort(np.random.default_rng(seed).choice(total, max_elements, replace=False))
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        for k, p in enumerate(paths):
            sel = flat[(flat >= starts[k]) & (flat < starts[k] + sizes[k])] - starts[k]
            chosen[p] = sel.tolist()

    worst = 0.0
    for p in paths:
        if chosen[p] is not None and not chosen[p]:
            continue

        def f(path=p):
            value = float(function({q: Tensor(a) for q, a in arrays.items()}).data)
            if not np.isfinite(value):
                raise NonFiniteError(f"non-finite function value while perturbing {path}")
            return value

        num = numeric_grad(f, arrays[p], epsilon, chosen[p])
        worst = max(worst, rel_error(leaves[p].grad, num, chosen[p], scale))
    return worst
