"""Differentiable primitives.

Each primitive computes its forward value with numpy and registers a
vector-Jacobian product on the active tape. Broadcasting follows numpy; the
vjp sums gradients back down to each operand's shape.
"""

from __future__ import annotations

import builtins

import numpy as np

from .tensor import DiffTensor, ShapeError, as_tensor, record

__all__ = [
    "add", "sub", "mul", "div", "neg", "matmul", "concat", "slice", "reshape",
    "transpose", "relu", "sigmoid", "tanh", "softplus", "exp", "log", "softmax",
    "sum", "mean", "bilinear_sample2d", "clamp", "segment_sum", "normalize",
    "quat_to_rotmat", "square", "stack",
]


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _bshape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)
    out = DiffTensor(a.values + b.values, dtype=np.result_type(a.dtype, b.dtype))
    record("add", (a, b), out,
           lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)
    out = DiffTensor(a.values - b.values, dtype=np.result_type(a.dtype, b.dtype))
    record("sub", (a, b), out,
           lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)
    out = DiffTensor(a.values * b.values, dtype=np.result_type(a.dtype, b.dtype))
    record("mul", (a, b), out,
           lambda g: (_unbroadcast(g * b.values, a.shape) if a.tracked else None,
                      _unbroadcast(g * a.values, b.shape) if b.tracked else None))
    return out


def div(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("div", a, b)
    q = a.values / b.values
    out = DiffTensor(q, dtype=np.result_type(a.dtype, b.dtype))
    record("div", (a, b), out,
           lambda g: (_unbroadcast(g / b.values, a.shape) if a.tracked else None,
                      _unbroadcast(-g * q / b.values, b.shape) if b.tracked else None))
    return out


def neg(a) -> DiffTensor:
    a = as_tensor(a)
    out = DiffTensor(-a.values, dtype=a.dtype)
    record("neg", (a,), out, lambda g: (-g,))
    return out


def square(a) -> DiffTensor:
    a = as_tensor(a)
    out = DiffTensor(a.values * a.values, dtype=a.dtype)
    record("square", (a,), out, lambda g: (2.0 * g * a.values,))
    return out


def matmul(a, b) -> DiffTensor:
    """Batched matrix product over the last two axes (numpy semantics, ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = DiffTensor(np.matmul(a.values, b.values), dtype=np.result_type(a.dtype, b.dtype))
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.values, -1, -2)), a.shape) if a.tracked else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.values, -1, -2), g), b.shape) if b.tracked else None
        return ga, gb

    record("matmul", (a, b), out, vjp)
    return out


def concat(tensors, axis: int = -1) -> DiffTensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", detail="no operands")
    try:
        vals = np.concatenate([t.values for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts], detail=f"axis={axis}") from None
    out = DiffTensor(vals, dtype=vals.dtype)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    record("concat", ts, out, lambda g: tuple(np.split(g, bounds, axis=axis)))
    return out


def stack(tensors, axis: int = 0) -> DiffTensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        vals = np.stack([t.values for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[t.shape for t in ts]) from None
    out = DiffTensor(vals, dtype=vals.dtype)
    record("stack", ts, out,
           lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))))
    return out


def slice(a, index) -> DiffTensor:
    """Basic or integer-array indexing; the vjp scatters back with accumulation."""
    a = as_tensor(a)
    try:
        vals = a.values[index]
    except IndexError as exc:
        raise ShapeError("slice", a.shape, detail=str(exc)) from None
    out = DiffTensor(np.array(vals, copy=True), dtype=a.dtype)

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    record("slice", (a,), out, vjp)
    return out


def reshape(a, shape) -> DiffTensor:
    a = as_tensor(a)
    try:
        vals = a.values.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, detail=f"target {shape}") from None
    out = DiffTensor(vals, dtype=a.dtype)
    record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))
    return out


def transpose(a, axes=None) -> DiffTensor:
    a = as_tensor(a)
    vals = np.transpose(a.values, axes)
    out = DiffTensor(vals, dtype=a.dtype)
    inv = None if axes is None else np.argsort(axes)
    record("transpose", (a,), out, lambda g: (np.transpose(g, inv),))
    return out


def relu(a) -> DiffTensor:
    a = as_tensor(a)
    mask = a.values > 0
    out = DiffTensor(np.where(mask, a.values, 0), dtype=a.dtype)
    record("relu", (a,), out, lambda g: (g * mask,))
    return out


def sigmoid(a) -> DiffTensor:
    a = as_tensor(a)
    x = a.values
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = DiffTensor(s, dtype=a.dtype)
    record("sigmoid", (a,), out, lambda g: (g * s * (1.0 - s),))
    return out


def tanh(a) -> DiffTensor:
    a = as_tensor(a)
    t = np.tanh(a.values)
    out = DiffTensor(t, dtype=a.dtype)
    record("tanh", (a,), out, lambda g: (g * (1.0 - t * t),))
    return out


def softplus(a) -> DiffTensor:
    a = as_tensor(a)
    x = a.values
    out = DiffTensor(np.logaddexp(0.0, x), dtype=a.dtype)

    def vjp(g):
        return (g * (0.5 * (1.0 + np.tanh(0.5 * x))),)

    record("softplus", (a,), out, vjp)
    return out


def exp(a) -> DiffTensor:
    a = as_tensor(a)
    e = np.exp(a.values)
    out = DiffTensor(e, dtype=a.dtype)
    record("exp", (a,), out, lambda g: (g * e,))
    return out


def log(a) -> DiffTensor:
    a = as_tensor(a)
    out = DiffTensor(np.log(a.values), dtype=a.dtype)
    record("log", (a,), out, lambda g: (g / a.values,))
    return out


def softmax(a, axis: int = -1) -> DiffTensor:
    a = as_tensor(a)
    z = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = DiffTensor(s, dtype=a.dtype)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    record("softmax", (a,), out, vjp)
    return out


def sum(a, axis=None, keepdims: bool = False) -> DiffTensor:
    a = as_tensor(a)
    out = DiffTensor(np.sum(a.values, axis=axis, keepdims=keepdims), dtype=a.dtype)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    record("sum", (a,), out, vjp)
    return out


def mean(a, axis=None, keepdims: bool = False) -> DiffTensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def clamp(a, lo=None, hi=None) -> DiffTensor:
    """Clip to ``[lo, hi]``; gradient is zero where the bound is active."""
    a = as_tensor(a)
    vals = np.clip(a.values, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.values >= lo
    if hi is not None:
        inside &= a.values <= hi
    out = DiffTensor(vals, dtype=a.dtype)
    record("clamp", (a,), out, lambda g: (g * inside,))
    return out


def segment_sum(a, segment_ids, num_segments: int) -> DiffTensor:
    """Sum rows of ``a`` that share a segment id; output has ``num_segments`` rows."""
    a = as_tensor(a)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape != a.shape[:1]:
        raise ShapeError("segment_sum", a.shape, ids.shape)
    vals = np.zeros((num_segments,) + a.shape[1:], dtype=a.dtype)
    np.add.at(vals, ids, a.values)
    out = DiffTensor(vals, dtype=a.dtype)
    record("segment_sum", (a,), out, lambda g: (g[ids],))
    return out


def normalize(a, axis: int = -1, eps: float = 1e-8, fallback=None) -> DiffTensor:
    """Scale to unit norm along ``axis``.

    Rows with norm below ``eps`` are replaced by ``fallback`` (zero gradient).
    """
    a = as_tensor(a)
    x = a.values
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    small = n < eps
    safe = np.where(small, 1.0, n)
    y = x / safe
    if fallback is not None:
        y = np.where(small, np.asarray(fallback, dtype=x.dtype), y)
    else:
        y = np.where(small, 0.0, y)
    out = DiffTensor(y, dtype=a.dtype)

    def vjp(g):
        gx = (g - y * (g * y).sum(axis=axis, keepdims=True)) / safe
        return (np.where(small, 0.0, gx),)

    record("normalize", (a,), out, vjp)
    return out


def quat_to_rotmat(q) -> DiffTensor:
    """Rotation matrices from unit quaternions (w, x, y, z); shape (..., 4) -> (..., 3, 3)."""
    q = as_tensor(q)
    if q.shape[-1] != 4:
        raise ShapeError("quat_to_rotmat", q.shape, detail="last axis must be 4")
    w, x, y, z = np.moveaxis(q.values, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    out = DiffTensor(R, dtype=q.dtype)

    def vjp(g):
        gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
                  - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
        gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
                  - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
                  + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
        gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
                  + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
                  + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
        gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
                  + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
                  + x * g[..., 2, 0] + y * g[..., 2, 1])
        return (np.stack([gw, gx, gy, gz], axis=-1),)

    record("quat_to_rotmat", (q,), out, vjp)
    return out


def bilinear_sample2d(fmap, uv) -> DiffTensor:
    """Sample a (C, H, W) map at normalized (u, v) in [0, 1]^2; returns (K, C).

    ``u`` spans the width, ``v`` the height, with texel centers at
    ``(i + 0.5) / W``. Coordinates outside the texel-center range are clamped
    to the border and receive zero gradient along the clamped direction.
    """
    fmap, uv = as_tensor(fmap), as_tensor(uv)
    if fmap.ndim != 3 or uv.ndim != 2 or uv.shape[1] != 2:
        raise ShapeError("bilinear_sample2d", fmap.shape, uv.shape)
    C, H, W = fmap.shape
    flat = fmap.values.reshape(C, H * W).T
    px = uv.values[:, 0] * W - 0.5
    py = uv.values[:, 1] * H - 0.5
    cx = np.clip(px, 0.0, W - 1)
    cy = np.clip(py, 0.0, H - 1)
    free_x = (px >= 0.0) & (px <= W - 1) & (W > 1)
    free_y = (py >= 0.0) & (py <= H - 1) & (H > 1)
    x0 = np.minimum(np.floor(cx).astype(np.int64), builtins.max(W - 2, 0))
    y0 = np.minimum(np.floor(cy).astype(np.int64), builtins.max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (cx - x0)[:, None]
    fy = (cy - y0)[:, None]
    i00, i01 = y0 * W + x0, y0 * W + x1
    i10, i11 = y1 * W + x0, y1 * W + x1
    f00, f01, f10, f11 = flat[i00], flat[i01], flat[i10], flat[i11]
    vals = ((1 - fx) * (1 - fy) * f00 + fx * (1 - fy) * f01
            + (1 - fx) * fy * f10 + fx * fy * f11)
    out = DiffTensor(vals, dtype=np.result_type(fmap.dtype, uv.dtype))

    def vjp(g):
        gmap = None
        if fmap.tracked:
            acc = np.zeros((H * W, C), dtype=g.dtype)
            for idx, wt in ((i00, (1 - fx) * (1 - fy)), (i01, fx * (1 - fy)),
                            (i10, (1 - fx) * fy), (i11, fx * fy)):
                np.add.at(acc, idx, g * wt)
            gmap = acc.T.reshape(C, H, W)
        guv = None
        if uv.tracked:
            dx = ((1 - fy) * (f01 - f00) + fy * (f11 - f10) * 1.0)
            dy = ((1 - fx) * (f10 - f00) + fx * (f11 - f01))
            gu = (g * dx).sum(axis=1) * W * free_x
            gv = (g * dy).sum(axis=1) * H * free_y
            guv = np.stack([gu, gv], axis=1)
        return gmap, guv

    record("bilinear_sample2d", (fmap, uv), out, vjp)
    return out
