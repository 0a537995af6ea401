"""Differentiable operators on :class:`Tensor` (NCHW layout for images)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor

__all__ = [
    "ConvSpec",
    "add",
    "mul",
    "relu",
    "sigmoid",
    "exp",
    "elementwise",
    "sum",
    "reshape",
    "transpose",
    "concat",
    "concat_channels",
    "channel_affine",
    "conv2d",
    "conv_output_size",
    "max_pool",
    "upsample2x",
    "take",
]


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel, self.stride) <= 0:
            raise ValueError(f"channels, kernel and stride must be positive: {self}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0: {self}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# -- broadcasting --------------------------------------------------------------------

def _broadcast_ok(xs: tuple, ys: tuple) -> bool:
    """Equal shapes, scalar operand, or one-channel map over NCHW channels."""
    if xs == ys or len(ys) == 0 or len(xs) == 0:
        return True
    if len(xs) == len(ys) == 4 and xs[0] == ys[0] and xs[2:] == ys[2:] and 1 in (xs[1], ys[1]):
        return True
    return False


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, (a, b) in enumerate(zip(g.shape, shape)) if b == 1 and a != 1)
    return g.sum(axis=axes, keepdims=True)


def _coerce(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def add(x, y) -> Tensor:
    x = _coerce(x)
    y = _coerce(y, x)
    if not _broadcast_ok(x.shape, y.shape):
        raise ShapeError(f"add: incompatible shapes {x.shape} and {y.shape}")
    xs, ys = x.shape, y.shape

    def backward(g):
        return _unbroadcast(g, xs), _unbroadcast(g, ys)

    return Tensor._from_op(x.data + y.data, (x, y), backward)


def mul(x, y) -> Tensor:
    x = _coerce(x)
    y = _coerce(y, x)
    if not _broadcast_ok(x.shape, y.shape):
        raise ShapeError(f"mul: incompatible shapes {x.shape} and {y.shape}")
    xd, yd = x.data, y.data

    def backward(g):
        return _unbroadcast(g * yd, xd.shape), _unbroadcast(g * xd, yd.shape)

    return Tensor._from_op(xd * yd, (x, y), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # maximum keeps NaN so the divergence guard still sees it
    out = np.maximum(x.data, 0).astype(x.dtype, copy=False)
    return Tensor._from_op(out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1 - out),))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,))


def elementwise(op: str, x, y=None) -> Tensor:
    """Dispatch by name: add, mul, relu, sigmoid."""
    if op == "add":
        return add(x, y)
    if op == "mul":
        return mul(x, y)
    if op == "relu":
        return relu(as_tensor(x))
    if op == "sigmoid":
        return sigmoid(as_tensor(x))
    raise ValueError(f"unknown elementwise op {op!r}")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return Tensor._from_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                           lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs, axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of an empty list")
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: incompatible shapes {ref} and {x.shape} along axis {axis}")
    if len(xs) == 1:
        return xs[0]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return Tensor._from_op(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


def concat_channels(xs) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    for x in xs:
        if x.ndim != 4:
            raise ShapeError(f"concat_channels expects NCHW tensors, got {x.shape}")
    return concat(xs, axis=1)


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor | None = None) -> Tensor:
    """Per-channel y = scale[c] * x + shift[c] on NCHW input."""
    if scale.shape != (x.shape[1],):
        raise ShapeError(f"channel_affine: scale {scale.shape} vs channels {x.shape[1]}")
    s = scale.data.reshape(1, -1, 1, 1)
    out = x.data * s
    parents = (x, scale)
    if shift is not None:
        out = out + shift.data.reshape(1, -1, 1, 1)
        parents = (x, scale, shift)
    xd = x.data

    def backward(g):
        grads = [g * s, (g * xd).sum(axis=(0, 2, 3))]
        if shift is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return Tensor._from_op(out, parents, backward)


# -- convolution ------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None, spec: ConvSpec) -> Tensor:
    """Cross-correlation via patch matrices."""
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d: input {x.shape} does not match in_channels={spec.in_channels}")
    k, s, p = spec.kernel, spec.stride, spec.padding
    want = (spec.out_channels, spec.in_channels, k, k)
    if w.shape != want:
        raise ShapeError(f"conv2d: weight {w.shape} does not match expected {want}")
    if b is not None and b.shape != (spec.out_channels,):
        raise ShapeError(f"conv2d: bias {b.shape} does not match ({spec.out_channels},)")
    n, c, h, wd = x.shape
    ho = conv_output_size(h, k, s, p)
    wo = conv_output_size(wd, k, s, p)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {k} with padding {p}")

    xd = x.data
    if k == 1 and p == 0:
        xs = xd[:, :, ::s, ::s] if s > 1 else xd
        cols = xs.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(spec.out_channels, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, spec.out_channels).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, spec.out_channels)
        gw = (g2.T @ cols).reshape(w.shape)
        gb = g2.sum(axis=0) if b is not None else None
        gx = None
        if x.requires_grad:
            dcols = g2 @ wmat
            if k == 1 and p == 0:
                gxs = dcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
                if s > 1:
                    gx = np.zeros_like(xd)
                    gx[:, :, ::s, ::s][:, :, :ho, :wo] = gxs
                else:
                    gx = np.ascontiguousarray(gxs)
            else:
                dcols = dcols.reshape(n, ho, wo, c, k, k)
                gxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=xd.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += (
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                        )
                gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, backward)


def max_pool(x: Tensor, k: int = 3, s: int = 2, p: int = 1) -> Tensor:
    """Max pooling with -inf padding; gradient goes to the first maximum."""
    n, c, h, wd = x.shape
    ho = conv_output_size(h, k, s, p)
    wo = conv_output_size(wd, k, s, p)
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf) if p else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                sel = idx == i * k + j
                if sel.any():
                    gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += g * sel
        return (gxp[:, :, p:p + h, p:p + wd] if p else gxp,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward)


def _nearest_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    src = (np.arange(n_out) * n_in) // n_out
    m = np.zeros((n_out, n_in), dtype=dtype)
    m[np.arange(n_out), src] = 1
    return m


def upsample2x(x: Tensor, size: tuple | None = None) -> Tensor:
    """Nearest-neighbour upsampling; ``size`` = (H, W) targets odd lateral sizes."""
    n, c, h, w = x.shape
    ho, wo = size if size is not None else (2 * h, 2 * w)
    if ho == 2 * h and wo == 2 * w:
        out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

        def backward(g):
            return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

        return Tensor._from_op(out, (x,), backward)
    rm = _nearest_matrix(h, ho, x.dtype)
    cm = _nearest_matrix(w, wo, x.dtype)
    rows = rm.argmax(axis=1)
    colsi = cm.argmax(axis=1)
    out = x.data[:, :, rows][:, :, :, colsi]

    def backward(g):
        return (np.einsum("oh,ncop,pw->nchw", rm, g, cm, optimize=True),)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward)


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array (scatter-add backward)."""
    index = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (gx,)

    return Tensor._from_op(np.take(x.data, index, axis=axis), (x,), backward)
