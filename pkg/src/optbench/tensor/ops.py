"""Differentiable primitives.

Each primitive computes its output with numpy and, when a graph is active and
an operand needs a gradient, records a vector-Jacobian product closure.  The
set is deliberately small: exactly what the built-in test problems need.

Layout conventions: images are NHWC, convolution kernels are
``[height, width, in_channels, out_channels]`` and use "same" zero padding
with stride 1.
"""

from __future__ import annotations

from numbers import Number

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .engine import ShapeError, Tensor, active_graph

__all__ = [
    "add", "sub", "mul", "neg", "square", "cos", "sum", "mean", "matmul",
    "add_bias", "affine", "relu", "sigmoid", "flatten", "getitem", "conv2d",
    "maxpool2d", "softmax_cross_entropy", "l2_penalty", "log_softmax",
]


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Number) and like is not None:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _wrap(b, a)
    b = _wrap(b)
    return _wrap(a, b), b


def _emit(op: str, inputs: tuple[Tensor, ...], data: np.ndarray, vjp) -> Tensor:
    out = Tensor(data)
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        graph.record(op, inputs, out, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = _wrap(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def square(a) -> Tensor:
    a = _wrap(a)
    return _emit("square", (a,), a.data * a.data, lambda g: (2 * a.data * g,))


def cos(a) -> Tensor:
    a = _wrap(a)
    return _emit("cos", (a,), np.cos(a.data), lambda g: (-np.sin(a.data) * g,))


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0).astype(a.dtype, copy=False),
                 lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    # Split by sign so exp never overflows.
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype, copy=False)
    return _emit("sigmoid", (a,), s, lambda g: (g * s * (1 - s),))


# -- reductions and reshapes -----------------------------------------------------

def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _wrap(a)
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError("sum", a.shape, detail=f"axis {axis} out of range")
    data = np.asarray(a.data.sum(axis=axis), dtype=a.dtype)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _emit("sum", (a,), data, vjp)


def mean(a, axis: int | None = None) -> Tensor:
    a = _wrap(a)
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError("mean", a.shape, detail=f"axis {axis} out of range")
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean", a.shape, detail="mean over an empty axis")
    data = np.asarray(a.data.mean(axis=axis), dtype=a.dtype)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / a.dtype.type(n), a.shape).astype(a.dtype),)

    return _emit("mean", (a,), data, vjp)


def flatten(a) -> Tensor:
    """Collapse everything but the leading (batch) axis."""
    a = _wrap(a)
    if a.ndim < 1:
        raise ShapeError("flatten", a.shape, detail="needs a batch axis")
    shape = a.shape
    return _emit("flatten", (a,), a.data.reshape(shape[0], -1),
                 lambda g: (g.reshape(shape),))


def getitem(a, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    a = _wrap(a)
    parts = index if isinstance(index, tuple) else (index,)
    if not all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis for p in parts):
        raise TypeError("getitem supports integer/slice indexing only")
    try:
        data = a.data[index]
    except IndexError as exc:
        raise ShapeError("getitem", a.shape, detail=str(exc)) from None

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _emit("getitem", (a,), np.array(data), vjp)


# -- linear algebra ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _emit("matmul", (a, b), a.data @ b.data,
                 lambda g: (g @ b.data.T if a.requires_grad else None,
                            a.data.T @ g if b.requires_grad else None))


def add_bias(x, b) -> Tensor:
    """Add a bias vector along the last (channel) axis."""
    x, b = _pair(x, b)
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError("add_bias", x.shape, b.shape)
    axes = tuple(range(x.ndim - 1))
    return _emit("add_bias", (x, b), x.data + b.data,
                 lambda g: (g, g.sum(axis=axes)))


def affine(x, w, b=None) -> Tensor:
    """``x @ w (+ b)`` for a 2-D input."""
    y = matmul(x, w)
    return y if b is None else add_bias(y, b)


# -- convolution and pooling ------------------------------------------------------

def _same_pads(k: int) -> tuple[int, int]:
    before = (k - 1) // 2
    return before, k - 1 - before


def conv2d(x, k) -> Tensor:
    """2-D cross-correlation, NHWC input, stride 1, "same" zero padding."""
    x, k = _pair(x, k)
    if x.ndim != 4 or k.ndim != 4 or x.shape[3] != k.shape[2]:
        raise ShapeError("conv2d", x.shape, k.shape)
    n, h, w, c = x.shape
    kh, kw, _, f = k.shape
    (pt, pb), (pl, pr) = _same_pads(kh), _same_pads(kw)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    # windows: [n, h, w, c, kh, kw] -> columns [n*h*w, kh*kw*c]
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, kh * kw * c)
    kmat = k.data.reshape(kh * kw * c, f)
    out = (cols @ kmat).reshape(n, h, w, f)

    def vjp(g):
        g2 = g.reshape(n * h * w, f)
        gk = (cols.T @ g2).reshape(k.shape) if k.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(n, h, w, kh, kw, c)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
            gx = dxp[:, pt:pt + h, pl:pl + w, :]
        return gx, gk

    return _emit("conv2d", (x, k), out, vjp)


def maxpool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling (window = stride = ``size``), NHWC.

    Ragged borders are padded with -inf ("same" semantics).  Gradients go to
    the first maximal entry of each window, which keeps backward deterministic.
    """
    x = _wrap(x)
    if x.ndim != 4 or size < 1:
        raise ShapeError("maxpool2d", x.shape, detail=f"size={size}")
    n, h, w, c = x.shape
    ho, wo = -(-h // size), -(-w // size)
    xd = x.data
    if ho * size != h or wo * size != w:
        xd = np.pad(xd, ((0, 0), (0, ho * size - h), (0, wo * size - w), (0, 0)),
                    constant_values=-np.inf)
    blocks = xd.reshape(n, ho, size, wo, size, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros(blocks.shape, dtype=x.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, ho, wo, c, size, size).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * size, wo * size, c)
        return (gx[:, :h, :w, :],)

    return _emit("maxpool2d", (x,), out, vjp)


# -- losses ----------------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    logits = _wrap(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    b, classes = logits.shape
    if b == 0:
        raise ShapeError("softmax_cross_entropy", logits.shape, detail="empty batch")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {classes})")
    logp = log_softmax(logits.data)
    rows = np.arange(b)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / logits.dtype.type(b)),)

    return _emit("softmax_cross_entropy", (logits,), loss, vjp)


def l2_penalty(tensors, coeff: float) -> Tensor:
    """``coeff * 0.5 * sum ||w||^2`` over ``tensors``."""
    tensors = tuple(_wrap(t) for t in tensors)
    if not tensors:
        return Tensor(np.zeros((), dtype=np.float32))
    dtype = tensors[0].dtype
    total = np.asarray(0.5 * coeff * np.sum([np.vdot(t.data, t.data) for t in tensors]), dtype=dtype)
    return _emit("l2_penalty", tensors, total,
                 lambda g: tuple(coeff * g * t.data for t in tensors))
