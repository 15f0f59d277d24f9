"""Dense tensors with tape-based reverse-mode differentiation.

Only row-vector-over-matrix broadcasting is accepted: a 1-D operand whose
length equals the trailing extent of the other operand. Every other shape
mix raises :class:`ShapeError`.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np

_state = threading.local()


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


def get_default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextmanager
def default_dtype(dtype):
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tape:
    """Ordered record of executed primitives; single use.

    Usage::

        with Tape() as tape:
            loss = f(x)
        tape.backward(loss)
    """

    def __init__(self):
        self._nodes: list = []
        self._consumed = False
        self._open = False

    def __enter__(self):
        if active_tape() is not None:
            raise TapeError("nested tapes are not supported")
        _state.tape = self
        self._open = True
        return self

    def __exit__(self, *exc):
        _state.tape = None
        self._open = False
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, out, inputs, backward):
        if self._consumed:
            raise TapeError("tape already consumed")
        self._nodes.append((out, inputs, backward))

    def backward(self, loss: "Tensor"):
        if self._consumed:
            raise TapeError("backward called twice on the same tape; re-run the forward pass")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        if self._open:
            _state.tape = None
            self._open = False
        loss.grad = np.ones_like(loss.data)
        for out, inputs, fn in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue
            grads = fn(g)
            for x, gx in zip(inputs, grads):
                if gx is None or not x.requires_grad:
                    continue
                if x.grad is None:
                    x.grad = gx
                else:
                    x.grad = x.grad + gx
            if not out.is_leaf:
                out.grad = None
        self._nodes = []


@contextmanager
def no_tape():
    prev = active_tape()
    _state.tape = None
    try:
        yield
    finally:
        _state.tape = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_leaf")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        want = dtype or get_default_dtype()
        if arr.dtype != want:
            arr = arr.astype(want)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, *inputs) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.is_leaf = False
    tape = active_tape()
    out.requires_grad = tape is not None and any(x.requires_grad for x in inputs)
    return out


def _record(out, inputs, fn):
    active_tape().record(out, inputs, fn)


def _bcast_kind(a, b, name):
    if a.shape == b.shape:
        return 0
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return 2
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return 1
    raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _row_sum(g, d):
    return g.reshape(-1, d).sum(axis=0)


# ---------------------------------------------------------------- arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _bcast_kind(a, b, "add")
    out = _make(a.data + b.data, a, b)
    if out.requires_grad:
        if kind == 0:
            _record(out, (a, b), lambda g: (g, g))
        elif kind == 2:
            _record(out, (a, b), lambda g: (g, _row_sum(g, b.shape[0])))
        else:
            _record(out, (a, b), lambda g: (_row_sum(g, a.shape[0]), g))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    kind = _bcast_kind(a, b, "sub")
    out = _make(a.data - b.data, a, b)
    if out.requires_grad:
        if kind == 0:
            _record(out, (a, b), lambda g: (g, -g))
        elif kind == 2:
            _record(out, (a, b), lambda g: (g, -_row_sum(g, b.shape[0])))
        else:
            _record(out, (a, b), lambda g: (_row_sum(g, a.shape[0]), -g))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _bcast_kind(a, b, "mul")
    ad, bd = a.data, b.data
    out = _make(ad * bd, a, b)
    if out.requires_grad:
        if kind == 0:
            _record(out, (a, b), lambda g: (g * bd if a.requires_grad else None,
                                             g * ad if b.requires_grad else None))
        elif kind == 2:
            _record(out, (a, b), lambda g: (g * bd if a.requires_grad else None,
                                             _row_sum(g * ad, bd.shape[0]) if b.requires_grad else None))
        else:
            _record(out, (a, b), lambda g: (_row_sum(g * bd, ad.shape[0]) if a.requires_grad else None,
                                             g * ad if b.requires_grad else None))
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _make(a.data * a.data.dtype.type(c), a)
    if out.requires_grad:
        _record(out, (a,), lambda g: (g * g.dtype.type(c),))
    return out


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = _make(a.data + a.data.dtype.type(c), a)
    if out.requires_grad:
        _record(out, (a,), lambda g: (g,))
    return out


def neg(a: Tensor) -> Tensor:
    out = _make(-a.data, a)
    if out.requires_grad:
        _record(out, (a,), lambda g: (-g,))
    return out


def square(a: Tensor) -> Tensor:
    ad = a.data
    out = _make(ad * ad, a)
    if out.requires_grad:
        _record(out, (a,), lambda g: (2 * g * ad,))
    return out


# ------------------------------------------------------------------ matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a weight matrix ``b`` of shape (k, m) or a batched ``b``
    with the same leading extents as ``a``."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    if bd.ndim == 2:
        out = _make(ad @ bd, a, b)
        if out.requires_grad:
            k, m = bd.shape

            def back(g):
                ga = g @ bd.T if a.requires_grad else None
                gb = ad.reshape(-1, k).T @ g.reshape(-1, m) if b.requires_grad else None
                return ga, gb

            _record(out, (a, b), back)
        return out
    if ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ {ad.shape} and {bd.shape}")
    out = _make(np.matmul(ad, bd), a, b)
    if out.requires_grad:

        def back(g):
            ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
            gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
            return ga, gb

        _record(out, (a, b), back)
    return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    xd, wd, bd = x.data, w.data, b.data
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[0] or bd.shape != (wd.shape[1],):
        raise ShapeError(f"affine: incompatible shapes {xd.shape}, {wd.shape}, {bd.shape}")
    out = _make(xd @ wd + bd, x, w, b)
    if out.requires_grad:
        k, m = wd.shape

        def back(g):
            g2 = g.reshape(-1, m)
            gx = g @ wd.T if x.requires_grad else None
            gw = xd.reshape(-1, k).T @ g2 if w.requires_grad else None
            gb = g2.sum(axis=0) if b.requires_grad else None
            return gx, gw, gb

        _record(out, (x, w, b), back)
    return out


# -------------------------------------------------------------- activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = _make(x.data * mask, x)
    if out.requires_grad:
        _record(out, (x,), lambda g: (g * mask,))
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    k = xd.dtype.type(0.044715)
    inner = c * (xd + k * xd * xd * xd)
    th = np.tanh(inner)
    half = xd.dtype.type(0.5)
    out = _make(half * xd * (1 + th), x)
    if out.requires_grad:

        def back(g):
            d = half * (1 + th) + half * xd * (1 - th * th) * c * (1 + 3 * k * xd * xd)
            return (g * d,)

        _record(out, (x,), back)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    out = _make(s, x)
    if out.requires_grad:
        _record(out, (x,), lambda g: (g * s * (1 - s),))
    return out


def _sigmoid_np(x):
    # stable on both tails
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = _make(t, x)
    if out.requires_grad:
        _record(out, (x,), lambda g: (g * (1 - t * t),))
    return out


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = _make(np.logaddexp(0, xd).astype(xd.dtype, copy=False), x)
    if out.requires_grad:
        s = _sigmoid_np(xd)
        _record(out, (x,), lambda g: (g * s,))
    return out


def softmax(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    out = _make(y, x)
    if out.requires_grad:
        _record(out, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    d = xd.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: incompatible shapes {xd.shape}, {gain.shape}, {bias.shape}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    out = _make(xhat * gain.data + bias.data, x, gain, bias)
    if out.requires_grad:

        def back(g):
            gg = gain.data
            gx = None
            if x.requires_grad:
                gh = g * gg
                gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                            - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            gw = _row_sum(g * xhat, d) if gain.requires_grad else None
            gb = _row_sum(g, d) if bias.requires_grad else None
            return gx, gw, gb

        _record(out, (x, gain, bias), back)
    return out


# --------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    xd = x.data
    out = _make(np.asarray(xd.sum(axis=axis)), x)
    if out.requires_grad:
        shape = xd.shape

        def back(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        _record(out, (x,), back)
    return out


def mean(x: Tensor, axis=None) -> Tensor:
    xd = x.data
    n = xd.size if axis is None else xd.shape[axis]
    out = _make(np.asarray(xd.mean(axis=axis)), x)
    if out.requires_grad:
        shape = xd.shape
        inv = xd.dtype.type(1.0 / n)

        def back(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g * inv, shape).copy(),)

        _record(out, (x,), back)
    return out


# ------------------------------------------------------------------- layout


def concat(xs, axis=-1) -> Tensor:
    xs = list(xs)
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or x.shape[:ax] + x.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {ref} and {x.shape}")
    out = _make(np.concatenate([x.data for x in xs], axis=ax), *xs)
    if out.requires_grad:
        bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
        _record(out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=ax)))
    return out


def take(x: Tensor, idx, axis=0) -> Tensor:
    """Gather slices of ``x`` along ``axis`` (gather rows for axis 0)."""
    idx = np.asarray(idx, dtype=np.intp)
    xd = x.data
    out = _make(np.take(xd, idx, axis=axis), x)
    if out.requires_grad:
        shape = xd.shape

        def back(g):
            gx = np.zeros(shape, dtype=g.dtype)
            gm = np.moveaxis(gx, axis, 0)
            np.add.at(gm, idx, np.moveaxis(g, axis, 0) if idx.ndim == 1 else g)
            return (gx,)

        _record(out, (x,), back)
    return out


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"masked_fill: mask shape {mask.shape} != {x.shape}")
    out = _make(np.where(mask, x.data.dtype.type(value), x.data), x)
    if out.requires_grad:
        keep = ~mask
        _record(out, (x,), lambda g: (g * keep,))
    return out


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    out = _make(x.data.reshape(shape), x)
    if out.requires_grad:
        _record(out, (x,), lambda g: (g.reshape(src),))
    return out


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _make(np.transpose(x.data, axes), x)
    if out.requires_grad:
        _record(out, (x,), lambda g: (np.transpose(g, inv),))
    return out


def expand(x: Tensor, n: int, axis: int) -> Tensor:
    """Insert a new axis of extent ``n`` at ``axis`` by repetition."""
    xd = x.data
    ax = axis % (xd.ndim + 1)
    out = _make(np.repeat(np.expand_dims(xd, ax), n, axis=ax), x)
    if out.requires_grad:
        _record(out, (x,), lambda g: (g.sum(axis=ax),))
    return out


# ------------------------------------------------------------------- losses


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = _make(np.asarray((diff * diff).mean()), a, b)
    if out.requires_grad:
        f = diff.dtype.type(2.0 / n)

        def back(g):
            gd = g * f * diff
            return (gd if a.requires_grad else None, -gd if b.requires_grad else None)

        _record(out, (a, b), back)
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean categorical cross-entropy over all leading positions."""
    labels = np.asarray(labels, dtype=np.intp)
    ld = logits.data
    if labels.shape != ld.shape[:-1]:
        raise ShapeError(f"cross_entropy: labels {labels.shape} vs logits {ld.shape}")
    c = ld.shape[-1]
    flat = ld.reshape(-1, c)
    lab = labels.reshape(-1)
    m = flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(flat - m).sum(axis=-1, keepdims=True)) + m
    logp = flat - lse
    n = lab.shape[0]
    out = _make(np.asarray(-logp[np.arange(n), lab].mean()), logits)
    if out.requires_grad:

        def back(g):
            p = np.exp(logp)
            p[np.arange(n), lab] -= 1
            return ((g * p / n).reshape(ld.shape).astype(ld.dtype, copy=False),)

        _record(out, (logits,), back)
    return out


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits."""
    x = logits.data
    y = np.asarray(targets, dtype=x.dtype)
    if y.shape != x.shape:
        raise ShapeError(f"bce_with_logits: targets {y.shape} vs logits {x.shape}")
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    out = _make(np.asarray(loss.mean()), logits)
    if out.requires_grad:
        n = x.size

        def back(g):
            return (g * (_sigmoid_np(x) - y) / x.dtype.type(n),)

        _record(out, (logits,), back)
    return out


def check_finite(x: Tensor, what: str = "value") -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"non-finite {what}")
    return x
