"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

STEP = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))))


def numeric_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = STEP):
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``params``."""
    grads = []
    for p in params:
        base = p.data.copy()
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            p.assign(base)
            fp = loss_fn().item()
            flat[i] = orig - step
            p.assign(base)
            fm = loss_fn().item()
            flat[i] = orig
            g.reshape(-1)[i] = (fp - fm) / (2.0 * step)
        p.assign(base)
        grads.append(g)
    return grads


def analytic_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]):
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss)
    return [grads.get(p, np.zeros_like(p.data)) for p in params]


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = STEP) -> float:
    """Max relative error between tape gradients and central differences."""
    analytic = analytic_gradients(loss_fn, params)
    numeric = numeric_gradients(loss_fn, params, step)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def _away_from(rng, shape, points, margin=1e-3, scale=1.5):
    x = rng.standard_normal(shape) * scale
    for p in points:
        close = np.abs(x - p) < margin
        x[close] += 4 * margin * np.sign(x[close] - p + 1e-300)
    return x


def _build(kind: str, shapes: Sequence, rng: np.random.Generator, attrs: dict):
    """Return (differentiable inputs, forward closure) for ``kind``."""
    P = lambda shape: Tensor(rng.standard_normal(tuple(shape)), requires_grad=True)  # noqa: E731
    if kind in ("add", "sub", "mul"):
        a = P(shapes[0])
        b = P(shapes[1] if len(shapes) > 1 else shapes[0])
        fn = getattr(ad, kind)
        return [a, b], lambda: fn(a, b)
    if kind == "matmul":
        a, b = P(shapes[0]), P(shapes[1])
        return [a, b], lambda: ad.matmul(a, b)
    if kind == "conv1d":
        x, w = P(shapes[0]), P(shapes[1])
        b = P((shapes[1][0],))
        return [x, w, b], lambda: ad.conv1d(x, w, b)
    if kind == "group_norm":
        x = P(shapes[0])
        gamma, beta = P((shapes[0][-1],)), P((shapes[0][-1],))
        groups = attrs.get("groups", 2)
        return [x, gamma, beta], lambda: ad.group_norm(x, gamma, beta, groups)
    if kind == "layer_norm":
        x = P(shapes[0])
        gamma, beta = P((shapes[0][-1],)), P((shapes[0][-1],))
        return [x, gamma, beta], lambda: ad.layer_norm(x, gamma, beta)
    if kind in ("softmax", "silu", "mish"):
        x = P(shapes[0])
        fn = getattr(ad, kind)
        return [x], lambda: fn(x)
    if kind == "clamp":
        lo, hi = attrs.get("lo", -1.0), attrs.get("hi", 1.0)
        x = Tensor(_away_from(rng, shapes[0], (lo, hi)), requires_grad=True)
        return [x], lambda: ad.clamp(x, lo, hi)
    if kind == "mse":
        a, b = P(shapes[0]), P(shapes[0])
        return [a, b], lambda: ad.mse(a, b)
    if kind == "softmax-then-mse":
        x = P(shapes[0])
        y = Tensor(rng.random(tuple(shapes[0])))
        return [x], lambda: ad.mse(ad.softmax(x), y)
    if kind == "cross_entropy":
        x = P(shapes[0])
        labels = rng.integers(0, shapes[0][1], size=shapes[0][0])
        return [x], lambda: ad.cross_entropy(x, labels)
    if kind == "concat":
        ts = [P(s) for s in shapes]
        axis = attrs.get("axis", 0)
        return ts, lambda: ad.concat(ts, axis=axis)
    if kind == "slice":
        x = P(shapes[0])
        axis = attrs.get("axis", 0)
        start = attrs.get("start", 0)
        stop = attrs.get("stop", max(1, x.shape[axis] - 1))
        return [x], lambda: ad.slice_axis(x, axis, start, stop)
    if kind == "embedding":
        table = P(shapes[0])
        idx = rng.integers(0, shapes[0][0], size=attrs.get("count", 5))
        return [table], lambda: ad.embedding(table, idx)
    if kind == "reshape":
        x = P(shapes[0])
        return [x], lambda: ad.reshape(x, (-1,))
    if kind == "transpose":
        x = P(shapes[0])
        axes = attrs.get("axes", tuple(reversed(range(len(shapes[0])))))
        return [x], lambda: ad.transpose(x, axes)
    if kind == "sum":
        x = P(shapes[0])
        return [x], lambda: ad.sum_all(x)
    raise ValueError(f"grad_check: unsupported kind {kind!r}")


GRAD_CHECK_KINDS = (
    "add", "sub", "mul", "matmul", "conv1d", "group_norm", "layer_norm", "softmax",
    "silu", "mish", "mse", "softmax-then-mse", "cross_entropy", "concat", "slice",
    "clamp", "embedding", "reshape", "transpose", "sum",
)


def grad_check(kind: str, shapes: Sequence, seed: int = 0, attrs: dict | None = None) -> float:
    """Max relative error of one op's gradient against central differences.

    Non-scalar outputs are reduced with a fixed random weighting so that every
    output entry contributes to the checked scalar.
    """
    rng = np.random.default_rng(seed)
    inputs, forward = _build(kind, shapes, rng, attrs or {})
    probe = forward()
    weights = Tensor(rng.standard_normal(probe.shape))

    def loss():
        return ad.sum_all(ad.mul(forward(), weights))

    return check_gradients(loss, inputs)
