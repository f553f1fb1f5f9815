"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active (``with tape:``) are
recorded in execution order; :meth:`Tape.backward` replays them in reverse.
Outside a tape, operations only compute values, which is what inference uses.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "tensor",
    "add",
    "sub",
    "mul",
    "matmul",
    "conv1d",
    "group_norm",
    "layer_norm",
    "softmax",
    "silu",
    "mish",
    "mse",
    "cross_entropy",
    "concat",
    "slice_axis",
    "clamp",
    "embedding",
    "reshape",
    "transpose",
    "sum_all",
    "forward_op",
    "OPS",
]


class ShapeError(ValueError):
    """Raised when an operation receives inputs of incompatible shape."""


class Tensor:
    """Immutable float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def assign(self, value: np.ndarray, copy: bool = True) -> None:
        """Replace the payload (used by optimizers; shape must not change).

        ``copy=False`` adopts a float64 array the caller will not touch again.
        """
        arr = np.array(value, dtype=np.float64, copy=copy or None)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign: shape {arr.shape} != {self.data.shape}")
        arr.setflags(write=False)
        self.data = arr

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations.

    Each record is ``(kind, output, inputs, vjp)`` where ``vjp`` maps the
    output cotangent to one cotangent per input (``None`` when an input is
    not differentiable).
    """

    def __init__(self):
        self.records: list[tuple[str, Tensor, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, kind: str, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self.records.append((kind, out, inputs, vjp))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Propagate d(loss)/d(.) through the tape.

        Returns a map from every ``requires_grad`` tensor reached (including
        ``loss`` itself) to its gradient; leaf tensors also get ``.grad`` set.
        """
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            shape = getattr(loss, "shape", None)
            raise ShapeError(f"backward: loss must be a scalar tensor, got shape {shape}")
        if id(loss) not in self._produced and not loss.requires_grad:
            raise ValueError("backward: loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        tensors: dict[int, Tensor] = {id(loss): loss}
        for kind, out, inputs, vjp in reversed(self.records):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    tensors[key] = inp
        result = {}
        for key, g in grads.items():
            t = tensors[key]
            result[t] = g
            if key not in self._produced:
                t.grad = g
        return result


def _wrap(data: np.ndarray, requires_grad: bool) -> Tensor:
    # op outputs are fresh arrays (or views of frozen inputs): freeze without copying
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=np.float64)
    if arr.flags.writeable:
        arr.setflags(write=False)
    out.data = arr
    out.requires_grad = requires_grad
    out.grad = None
    out.name = None
    return out


def _make(kind: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    inputs = tuple(inputs)
    needs = any(t.requires_grad for t in inputs)
    out = _wrap(data, needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.record(kind, out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise and linear algebra


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make("mul", ad * bd, (a, b), vjp)


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (both inputs ndim >= 2)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make("matmul", out, (a, b), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _make("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


# --------------------------------------------------------------------------
# convolution and normalization


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 1-D convolution with zero padding that preserves length.

    Channels-last: x is (B, L, C_in), w is (C_out, C_in, k) with odd k, b is
    (C_out,); the result is (B, L, C_out).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d: expected x (B,L,C) and w (O,C,k), got {x.shape} and {w.shape}")
    bsz, length, cin = x.shape
    cout, wcin, k = w.shape
    if wcin != cin:
        raise ShapeError(f"conv1d: input channels {cin} != kernel channels {wcin}")
    if k % 2 == 0:
        raise ShapeError(f"conv1d: kernel size {k} must be odd for length-preserving padding")
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv1d: bias shape {b.shape} != ({cout},)")
    pad = k // 2
    if pad:
        xp = np.zeros((bsz, length + 2 * pad, cin))
        xp[:, pad:pad + length] = x.data
        # cols[b, l, j*C_in + c] = xp[b, l + j, c]
        cols = np.concatenate([xp[:, j:j + length] for j in range(k)], axis=-1).reshape(bsz * length, k * cin)
    else:
        cols = x.data.reshape(bsz * length, cin)
    wmat = w.data.transpose(2, 1, 0).reshape(k * cin, cout)
    out = cols @ wmat
    if b is not None:
        out += b.data
    out = out.reshape(bsz, length, cout)

    def vjp(g):
        g2 = g.reshape(bsz * length, cout)
        gw = np.ascontiguousarray((cols.T @ g2).reshape(k, cin, cout).transpose(2, 1, 0))
        gcols = (g2 @ wmat.T).reshape(bsz, length, k, cin)
        if pad:
            gxp = np.zeros((bsz, length + 2 * pad, cin))
            for j in range(k):
                gxp[:, j:j + length] += gcols[:, :, j]
            gx = gxp[:, pad:pad + length]
        else:
            gx = gcols[:, :, 0]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w, b) if b is not None else (x, w)
    return _make("conv1d", out, inputs, vjp)


def _normalize_last(xg: np.ndarray, eps: float):
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return (xg - mu) * inv, inv


def _normalize_last_vjp(gh: np.ndarray, xhat: np.ndarray, inv: np.ndarray) -> np.ndarray:
    return inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Group normalization over channel groups, separately at each position.

    Channels-last x (B, L, C); statistics are taken over the C/groups channels
    of one group at one (batch, position), so positions never mix.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 3:
        raise ShapeError(f"group_norm: expected (B,L,C), got {x.shape}")
    bsz, length, ch = x.shape
    if groups < 1 or ch % groups:
        raise ShapeError(f"group_norm: {ch} channels not divisible into {groups} groups")
    if gamma.shape != (ch,) or beta.shape != (ch,):
        raise ShapeError(f"group_norm: scale/shift shapes {gamma.shape}, {beta.shape} != ({ch},)")
    gshape = (bsz, length, groups, ch // groups)
    xhat, inv = _normalize_last(x.data.reshape(gshape), eps)
    xhat_c = xhat.reshape(x.shape)
    out = xhat_c * gamma.data + beta.data
    gd = gamma.data

    def vjp(g):
        gx = _normalize_last_vjp((g * gd).reshape(gshape), xhat, inv).reshape(x.shape)
        return gx, (g * xhat_c).sum(axis=(0, 1)), g.sum(axis=(0, 1))

    return _make("group_norm", out, (x, gamma, beta), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with learned scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: scale/shift shapes {gamma.shape}, {beta.shape} != ({d},)")
    xhat, inv = _normalize_last(x.data, eps)
    out = xhat * gamma.data + beta.data
    gd = gamma.data
    red = tuple(range(x.ndim - 1))

    def vjp(g):
        return _normalize_last_vjp(g * gd, xhat, inv), (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make("layer_norm", out, (x, gamma, beta), vjp)


# --------------------------------------------------------------------------
# activations and losses


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make("softmax", p, (x,), vjp)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def silu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    xd = x.data
    return _make("silu", xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def mish(x: Tensor) -> Tensor:
    """x * tanh(softplus(x)), using tanh(log(1 + e^x)) = n / (n + 2), n = e^x (e^x + 2)."""
    x = _as_tensor(x)
    xd = x.data
    e = np.exp(np.minimum(xd, 20.0))
    n = e * (e + 2.0)
    t = n / (n + 2.0)

    def vjp(g):
        s = e / (1.0 + e)
        return (g * (t + xd * (1.0 - t * t) * s),)

    return _make("mish", xd * t, (x,), vjp)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over all entries (scalar)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    scale = 2.0 / diff.size

    def vjp(g):
        ga = g * scale * diff
        return ga, -ga

    return _make("mse", np.asarray(np.mean(diff * diff)), (a, b), vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; logits (B, K), integer labels (B,)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"cross_entropy: labels outside [0, {logits.shape[1]})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(labels.size)
    loss = -logp[rows, labels].mean()

    def vjp(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (g * grad / labels.size,)

    return _make("cross_entropy", np.asarray(loss), (logits,), vjp)


# --------------------------------------------------------------------------
# structural


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shapes {[u.shape for u in tensors]} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def vjp(g):
        idx = [slice(None)] * nd
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _make("concat", out, tensors, vjp)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    ax = axis % x.ndim
    if not 0 <= start < stop <= x.shape[ax]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _make("slice", x.data[idx], (x,), vjp)


def clamp(x: Tensor, lo: float = -1.0, hi: float = 1.0) -> Tensor:
    x = _as_tensor(x)
    inside = (x.data > lo) & (x.data < hi)
    return _make("clamp", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]``; indices are integer constants."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding: indices outside [0, {table.shape[0]})")
    shape = table.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make("embedding", table.data[idx], (table,), vjp)


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv1d": conv1d,
    "group_norm": group_norm,
    "layer_norm": layer_norm,
    "softmax": softmax,
    "silu": silu,
    "mish": mish,
    "mse": mse,
    "cross_entropy": cross_entropy,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": slice_axis,
    "clamp": clamp,
    "embedding": embedding,
    "reshape": reshape,
    "transpose": transpose,
    "sum": sum_all,
}


def forward_op(kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Dispatch an operation by name, e.g. ``forward_op("add", [a, b])``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **(attrs or {}))
