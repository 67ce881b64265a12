"""Differentiable primitives.

Each primitive computes its forward value with numpy and, when a tape is
active and some input requires gradients, records a vector-Jacobian product
closure.  Binary arithmetic follows numpy broadcasting; gradients are summed
back to the input shape.  Python scalars are promoted to the tensor dtype.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import DegenerateMaskError, DimensionError, ConfigError
from .tensor import Tensor, active_tape, current_tracker

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _emit(arr: np.ndarray, inputs: tuple, vjp, shared: bool = False) -> Tensor:
    tape = active_tape()
    if tape is not None:
        for t in inputs:
            if t.requires_grad:
                out = Tensor._wrap(arr, True, shared, inputs[0])
                tape.record(out, inputs, vjp)
                return out
    return Tensor._wrap(arr, False, shared, inputs[0] if shared else None)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.dtype != b.dtype:
            raise DimensionError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor._wrap(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor._wrap(np.asarray(a, dtype=b.dtype)), b
    raise TypeError("at least one operand must be a Tensor")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x if dtype is None or x.dtype == np.dtype(dtype) else x.astype(dtype)
    return Tensor(x, dtype=dtype)


# -- elementwise binary --------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _emit(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _emit(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    p = float(p)
    return _emit(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


# -- elementwise unary ---------------------------------------------------------


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def sin(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    c = x.dtype.type(_SQRT_2_OVER_PI)
    inner = c * (x + 0.044715 * x * x * x)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        dinner = c * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _emit(out, (a,), vjp)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(x, 0.0).astype(x.dtype, copy=False)

    def vjp(g):
        return (g / (1.0 + np.exp(-x)),)

    return _emit(out, (a,), vjp)


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``(..., m, k) @ (..., k, n)`` with broadcasting."""
    if not (isinstance(a, Tensor) and isinstance(b, Tensor)):
        a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise DimensionError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # shared right operand: one GEMM over all leading rows
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])

        def vjp2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _emit((a2 @ bd).reshape(lead + (bd.shape[-1],)), (a, b), vjp2)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit(ad @ bd, (a, b), vjp)


def matmul_t(a: Tensor, w: Tensor) -> Tensor:
    """``a @ swapaxes(w, -1, -2)`` without copying the transpose."""
    if a.ndim < 2 or w.ndim < 2 or a.shape[-1] != w.shape[-1]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {w.shape}^T")
    if a.dtype != w.dtype:
        raise DimensionError(f"matmul dtype mismatch: {a.dtype} vs {w.dtype}")
    ad, wd = a.data, w.data
    if wd.ndim == 2:
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])

        def vjp2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ wd).reshape(ad.shape) if a.requires_grad else None
            gw = g2.T @ a2 if w.requires_grad else None
            return ga, gw

        return _emit((a2 @ wd.T).reshape(lead + (wd.shape[0],)), (a, w), vjp2)
    wt = np.swapaxes(wd, -1, -2)

    def vjp(g):
        ga = gw = None
        if a.requires_grad:
            ga = _unbroadcast(g @ wd, ad.shape)
        if w.requires_grad:
            gw = _unbroadcast(np.swapaxes(g, -1, -2) @ ad, wd.shape)
        return ga, gw

    return _emit(ad @ wt, (a, w), vjp)


# -- reductions and shape ------------------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit(np.asarray(out, dtype=a.dtype), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return _emit(out, (a,), lambda g: (g.reshape(old),), shared=out.base is not None)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _emit(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype
    out = a.data[idx]
    advanced = _is_advanced(idx)

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    out = np.asarray(out)
    return _emit(out, (a,), vjp, shared=not advanced and out.base is not None)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _emit(np.stack([t.data for t in tensors], axis=axis), tensors, vjp)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = np.broadcast_to(a.data, tuple(shape))
    return _emit(np.ascontiguousarray(out), (a,), lambda g: (_unbroadcast(g, old),))


# -- fused network primitives --------------------------------------------------


def softmax_masked(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis restricted to ``mask`` (broadcastable bool).

    Masked-out positions are exactly 0; rows are stabilized by subtracting the
    row max over visible entries.
    """
    x = logits.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            np.broadcast_shapes(mask.shape, x.shape)
        except ValueError as exc:
            raise DimensionError(f"mask shape {mask.shape} does not fit logits {x.shape}") from exc
        if not mask.any(axis=-1).all():
            raise DegenerateMaskError("mask has a row with no visible entry")
        x = np.where(mask, x, -np.inf)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    if p.dtype != logits.dtype:
        p = p.astype(logits.dtype)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit(p, (logits,), vjp)


def softmax(logits: Tensor) -> Tensor:
    return softmax_masked(logits, None)


# score-matrix elements processed at once when no gradient is needed
ATTENTION_CHUNK_ELEMENTS = 1 << 14


def _masked_probs(logits: np.ndarray, mask) -> np.ndarray:
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None, scale: float = 1.0) -> Tensor:
    """Fused ``softmax_masked(scale * q k^T, mask) v`` over ``(..., n, dh)`` inputs.

    The probability matrix is kept only when a gradient will be needed;
    otherwise (batch, head) slices are processed in chunks of at most
    ``ATTENTION_CHUNK_ELEMENTS`` scores.  Scratch buffers are
    charged to the allocation tracker while they are alive.
    """
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1] or q.ndim < 2:
        raise DimensionError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    n = q.shape[-2]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (n, n):
            raise DimensionError(f"mask shape {mask.shape} does not fit sequence length {n}")
        if not mask.any(axis=-1).all():
            raise DegenerateMaskError("mask has a row with no visible entry")
    qd, kd, vd = q.data, k.data, v.data
    dt = qd.dtype.type
    s = dt(scale)
    tracker = current_tracker()
    need_grad = active_tape() is not None and (q.requires_grad or k.requires_grad or v.requires_grad)
    if not need_grad:
        lead = qd.shape[:-2]
        q2 = qd.reshape((-1,) + qd.shape[-2:])
        k2 = kd.reshape((-1,) + kd.shape[-2:])
        v2 = vd.reshape((-1,) + vd.shape[-2:])
        out = np.empty(q2.shape[:-1] + (vd.shape[-1],), dtype=qd.dtype)
        chunk = max(1, ATTENTION_CHUNK_ELEMENTS // (n * n))
        scratch = 2 * min(chunk, q2.shape[0]) * n * n * qd.itemsize
        tracker.alloc(scratch)
        try:
            for i in range(0, q2.shape[0], chunk):
                sl = slice(i, i + chunk)
                p = _masked_probs((q2[sl] * s) @ np.swapaxes(k2[sl], -1, -2), mask)
                out[sl] = p.astype(qd.dtype, copy=False) @ v2[sl]
        finally:
            tracker.free(scratch)
        return Tensor._wrap(out.reshape(lead + out.shape[-2:]))
    scratch = qd[..., :, :1].size * n * qd.itemsize
    tracker.alloc(scratch)
    try:
        p = _masked_probs((qd * s) @ np.swapaxes(kd, -1, -2), mask).astype(qd.dtype, copy=False)
    finally:
        tracker.free(scratch)
    out = p @ vd

    def vjp(g):
        gp = g @ np.swapaxes(vd, -1, -2)
        gl = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * s
        gq = gl @ kd if q.requires_grad else None
        gk = np.swapaxes(gl, -1, -2) @ qd if k.requires_grad else None
        gv = np.swapaxes(p, -1, -2) @ g if v.requires_grad else None
        return gq, gk, gv

    res = _emit(out, (q, k, v), vjp)
    # the saved probabilities live as long as the tape entry
    if res.requires_grad:
        res._holds(p.nbytes)
    return res


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data
    n = xd.shape[-1]

    def vjp(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = _unbroadcast(g * xhat, gd.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, gg, gb

    return _emit(out.astype(xd.dtype, copy=False), (x, gain, bias), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T (+ bias)`` with ``weight`` stored as (out, in)."""
    if bias is None:
        return matmul_t(x, weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear shape mismatch: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    if not (x.dtype == weight.dtype == bias.dtype):
        raise DimensionError(f"linear dtype mismatch: {x.dtype}, {weight.dtype}, {bias.dtype}")
    xd, wd = x.data, weight.data
    x2 = xd.reshape(-1, xd.shape[-1])
    y = x2 @ wd.T
    y += bias.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _emit(y.reshape(xd.shape[:-1] + (wd.shape[0],)), (x, weight, bias), vjp)


def quant_levels(bits: int) -> int:
    """Largest grid index of the symmetric signed quantizer."""
    return 2 ** (bits - 1) - 1


def fake_quantize(x: Tensor, bits: int, scale: float) -> Tensor:
    """Round to the symmetric grid ``k * scale``, ``|k| <= 2**(bits-1) - 1``.

    Gradient is straight-through inside the clamp range and zero outside.
    """
    if not scale > 0:
        raise ConfigError(f"quantizer scale must be positive, got {scale}")
    if bits < 2:
        raise ConfigError(f"quantizer needs at least 2 bits, got {bits}")
    qmax = quant_levels(bits)
    xd = x.data
    dt = xd.dtype.type
    s = dt(scale)
    k = np.rint(xd / s)
    inside = np.abs(k) <= qmax
    out = np.clip(k, -qmax, qmax) * s

    def vjp(g):
        return (np.where(inside, g, 0).astype(xd.dtype, copy=False),)

    return _emit(out.astype(xd.dtype, copy=False), (x,), vjp)
