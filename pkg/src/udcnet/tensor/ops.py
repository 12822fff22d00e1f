"""Differentiable ops. Each forward returns a Tensor carrying its adjoint.

Adjoint closures receive the upstream gradient and a tuple of booleans
saying which parents need a gradient; they return one array (or None) per
parent.
"""

from __future__ import annotations

import builtins
from typing import Sequence

import numpy as np
from scipy.special import expit

from .core import ShapeError, Tensor, as_tensor

__all__ = [
    "add", "sub", "mul", "div", "scalar_mul", "square", "sqrt", "log", "exp",
    "relu", "sigmoid", "clip", "sum", "mean", "reshape", "transpose", "flip",
    "roll", "concat", "slice", "mask_select", "conv3d", "upsample3d",
    "instance_norm", "max_pool3d", "OP_KINDS",
]

OP_KINDS = (
    "conv3d", "upsample3d", "instance_norm", "relu", "sigmoid", "add", "mul",
    "sub", "div", "scalar_mul", "sum", "mean", "square", "sqrt", "log", "exp",
    "clip", "max_pool3d", "concat", "slice", "mask_select", "reshape",
    "transpose", "flip", "roll",
)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_operands(a, b, op: str):
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}", node=op) from None
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def adjoint(g, need):
        return (_unbroadcast(g, a.shape) if need[0] else None,
                _unbroadcast(g, b.shape) if need[1] else None)

    return Tensor._result(a.data + b.data, (a, b), adjoint, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def adjoint(g, need):
        return (_unbroadcast(g, a.shape) if need[0] else None,
                _unbroadcast(-g, b.shape) if need[1] else None)

    return Tensor._result(a.data - b.data, (a, b), adjoint, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def adjoint(g, need):
        return (_unbroadcast(g * b.data, a.shape) if need[0] else None,
                _unbroadcast(g * a.data, b.shape) if need[1] else None)

    return Tensor._result(a.data * b.data, (a, b), adjoint, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    out = a.data / b.data

    def adjoint(g, need):
        return (_unbroadcast(g / b.data, a.shape) if need[0] else None,
                _unbroadcast(-g * out / b.data, b.shape) if need[1] else None)

    return Tensor._result(out, (a, b), adjoint, "div")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def adjoint(g, need):
        return (g * np.asarray(c, dtype=g.dtype),)

    return Tensor._result(a.data * np.asarray(c, dtype=a.dtype), (a,), adjoint, "scalar_mul")


def square(a: Tensor) -> Tensor:
    def adjoint(g, need):
        return (2.0 * g * a.data,)

    return Tensor._result(a.data * a.data, (a,), adjoint, "square")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def adjoint(g, need):
        return (g * 0.5 / out,)

    return Tensor._result(out, (a,), adjoint, "sqrt")


def log(a: Tensor) -> Tensor:
    def adjoint(g, need):
        return (g / a.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return Tensor._result(out, (a,), adjoint, "log")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def adjoint(g, need):
        return (g * out,)

    return Tensor._result(out, (a,), adjoint, "exp")


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0

    def adjoint(g, need):
        return (g * positive,)

    return Tensor._result(np.where(positive, a.data, 0).astype(a.dtype), (a,), adjoint, "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)

    def adjoint(g, need):
        return (g * out * (1 - out),)

    return Tensor._result(out, (a,), adjoint, "sigmoid")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)

    def adjoint(g, need):
        return (g * inside,)

    return Tensor._result(np.clip(a.data, lo, hi), (a,), adjoint, "clip")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def adjoint(g, need):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), adjoint, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.sum(axis=axes, keepdims=keepdims) / count

    def adjoint(g, need):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return Tensor._result(np.asarray(out, dtype=a.dtype), (a,), adjoint, "mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}", node="reshape") from None

    def adjoint(g, need):
        return (g.reshape(a.shape),)

    return Tensor._result(out, (a,), adjoint, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def adjoint(g, need):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return Tensor._result(np.ascontiguousarray(a.data.transpose(axes)), (a,), adjoint, "transpose")


def flip(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if not axes:
        return reshape(a, a.shape)

    def adjoint(g, need):
        return (np.ascontiguousarray(np.flip(g, axes)),)

    return Tensor._result(np.ascontiguousarray(np.flip(a.data, axes)), (a,), adjoint, "flip")


def roll(a: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)

    def adjoint(g, need):
        return (np.roll(g, tuple(-s for s in shifts), axes),)

    return Tensor._result(np.roll(a.data, shifts, axes), (a,), adjoint, "roll")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat shapes {ref} and {t.shape} differ off axis {ax}",
                             node="concat")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def adjoint(g, need):
        out = []
        for i, required in enumerate(need):
            if not required:
                out.append(None)
                continue
            idx = [builtins.slice(None)] * g.ndim
            idx[ax] = builtins.slice(bounds[i], bounds[i + 1])
            out.append(np.ascontiguousarray(g[tuple(idx)]))
        return tuple(out)

    data = np.concatenate([t.data for t in tensors], axis=ax)
    return Tensor._result(data, tensors, adjoint, "concat")


def slice(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; the adjoint scatters into zeros."""
    if not isinstance(index, tuple):
        index = (index,)
    for item in index:
        if not (isinstance(item, (int, np.integer, builtins.slice)) or item is Ellipsis):
            raise TypeError("slice supports ints, slices and Ellipsis only; "
                            "use mask_select for boolean selection")
    out = a.data[index]

    def adjoint(g, need):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return Tensor._result(np.ascontiguousarray(out), (a,), adjoint, "slice")


def mask_select(a: Tensor, mask: np.ndarray) -> Tensor:
    """Flat vector of the entries where ``mask`` is true (row-major order)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"mask shape {mask.shape} != tensor shape {a.shape}", node="mask_select")

    def adjoint(g, need):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[mask] = g
        return (full,)

    return Tensor._result(a.data[mask], (a,), adjoint, "mask_select")


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    return tuple(int(x) for x in v)


def _windows(kernel, out_sp, s):
    """Slices of the padded input read by each kernel offset, in C order."""
    ext = tuple(out_sp[a] * s[a] for a in range(3))
    for i in range(kernel[0]):
        for j in range(kernel[1]):
            for k in range(kernel[2]):
                yield (builtins.slice(None), builtins.slice(None),
                       builtins.slice(i, i + ext[0], s[0]), builtins.slice(j, j + ext[1], s[1]),
                       builtins.slice(k, k + ext[2], s[2]))


def _im2col(xp: np.ndarray, kernel, out_sp, s) -> np.ndarray:
    n, c = xp.shape[:2]
    nk = int(np.prod(kernel))
    cols = np.empty((n, c, nk) + tuple(out_sp), dtype=xp.dtype)
    for idx, win in enumerate(_windows(kernel, out_sp, s)):
        cols[:, :, idx] = xp[win]
    return cols.reshape(n, c * nk, -1)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of NCDHW input with (O, C, kd, kh, kw) kernels.

    Lowered to one GEMM per call on an im2col buffer laid out as
    (N, C*kd*kh*kw, Do*Ho*Wo), so output and gradients stay channel-first.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d expects 5-d input and kernel, got {x.shape}, {w.shape}",
                         node="conv3d")
    n, c, *spatial = x.shape
    o, cw, *kernel = w.shape
    if cw != c:
        raise ShapeError(f"input has {c} channels, kernel expects {cw}", node="conv3d")
    s, p = _triple(stride), _triple(padding)
    padded = [d + 2 * pp for d, pp in zip(spatial, p)]
    if any(ps < k for ps, k in zip(padded, kernel)):
        raise ShapeError(f"kernel {tuple(kernel)} larger than padded input {tuple(padded)}",
                         node="conv3d")
    out_sp = tuple((ps - k) // st + 1 for ps, k, st in zip(padded, kernel, s))
    xp = np.pad(x.data, ((0, 0), (0, 0)) + tuple((pp, pp) for pp in p)) if any(p) else x.data
    dtype = np.result_type(x.dtype, w.dtype)
    nk = int(np.prod(kernel))
    pointwise = nk == 1 and s == (1, 1, 1)
    cols = xp.reshape(n, c, -1) if pointwise else _im2col(xp, kernel, out_sp, s)
    w2 = w.data.reshape(o, -1)
    out = np.matmul(w2, cols)
    if b is not None:
        out = out + b.data.reshape(1, o, 1)
    out = out.reshape((n, o) + out_sp).astype(dtype, copy=False)
    parents = (x, w) if b is None else (x, w, b)
    # stride-1 input gradient as a correlation of the padded output gradient with the
    # flipped kernel: one gather plus one GEMM instead of a 27-way scatter-add
    transposed = s == (1, 1, 1) and not pointwise and all(0 <= pp < k for pp, k in zip(p, kernel))

    def adjoint(g, need):
        gm = g.reshape(n, o, -1)
        gx = gw = gb = None
        if need[1]:
            gw = gm[0] @ cols[0].T
            for i in range(1, n):
                gw = gw + gm[i] @ cols[i].T
            gw = gw.reshape(w.shape).astype(w.dtype, copy=False)
        if b is not None and need[2]:
            gb = g.sum(axis=(0, 2, 3, 4)).astype(b.dtype, copy=False)
        if need[0] and pointwise:
            gxp = np.matmul(w2.T, gm).reshape(xp.shape)
            gxp = gxp[:, :, p[0]:p[0] + spatial[0], p[1]:p[1] + spatial[1],
                      p[2]:p[2] + spatial[2]]
            gx = np.ascontiguousarray(gxp).astype(x.dtype, copy=False)
        elif need[0] and transposed:
            gpad = np.pad(g, ((0, 0), (0, 0)) + tuple((k - 1 - pp, k - 1 - pp)
                                                      for pp, k in zip(p, kernel)))
            wt = w.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4).reshape(c, -1)
            gcols = _im2col(gpad, kernel, tuple(spatial), (1, 1, 1))
            gx = np.matmul(wt, gcols).reshape(x.shape).astype(x.dtype, copy=False)
        elif need[0]:
            gcols = np.matmul(w2.T, gm).reshape((n, c, nk) + out_sp)
            gxp = np.zeros(xp.shape, dtype=gcols.dtype)
            for idx, win in enumerate(_windows(kernel, out_sp, s)):
                gxp[win] += gcols[:, :, idx]
            gxp = gxp[:, :, p[0]:p[0] + spatial[0], p[1]:p[1] + spatial[1],
                      p[2]:p[2] + spatial[2]]
            gx = np.ascontiguousarray(gxp).astype(x.dtype, copy=False)
        return (gx, gw) if b is None else (gx, gw, gb)

    return Tensor._result(out, parents, adjoint, "conv3d")


def upsample3d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the three trailing axes."""
    f = int(factor)
    out = x.data
    for ax in (2, 3, 4):
        out = np.repeat(out, f, axis=ax)
    n, c, d, h, w = x.shape

    def adjoint(g, need):
        return (g.reshape(n, c, d, f, h, f, w, f).sum(axis=(3, 5, 7)),)

    return Tensor._result(out, (x,), adjoint, "upsample3d")


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalisation over the spatial axes."""
    if x.ndim != 5:
        raise ShapeError(f"instance_norm expects NCDHW, got {x.shape}", node="instance_norm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"affine params must be ({c},), got {gamma.shape}, {beta.shape}",
                         node="instance_norm")
    axes = (2, 3, 4)
    count = x.shape[2] * x.shape[3] * x.shape[4]
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    g5 = gamma.data.reshape(1, c, 1, 1, 1)
    out = xhat * g5 + beta.data.reshape(1, c, 1, 1, 1)

    def adjoint(g, need):
        gx = gg = gb = None
        if need[1]:
            gg = (g * xhat).sum(axis=(0, 2, 3, 4)).astype(gamma.dtype, copy=False)
        if need[2]:
            gb = g.sum(axis=(0, 2, 3, 4)).astype(beta.dtype, copy=False)
        if need[0]:
            dxhat = g * g5
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = (inv_std / count) * (count * dxhat - s1 - xhat * s2)
            gx = gx.astype(x.dtype, copy=False)
        return gx, gg, gb

    return Tensor._result(out, (x, gamma, beta), adjoint, "instance_norm")


def max_pool3d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first max."""
    k = int(kernel)
    n, c, d, h, w = x.shape
    if d % k or h % k or w % k:
        raise ShapeError(f"spatial shape {x.shape[2:]} not divisible by {k}", node="max_pool3d")
    blocks = x.data.reshape(n, c, d // k, k, h // k, k, w // k, k)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, d // k, h // k, w // k, k ** 3)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def adjoint(g, need):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, d // k, h // k, w // k, k, k, k).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (gb.reshape(x.shape),)

    return Tensor._result(out, (x,), adjoint, "max_pool3d")
