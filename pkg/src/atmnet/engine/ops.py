"""Differentiable primitives.

Feature maps are channel-last, ``(B, H, W, C)``. Every op returns a new
:class:`Array` and, when recording, registers a closure mapping the output
gradient to one gradient per input (``None`` for non-differentiable inputs).
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from ..errors import ArgumentError, DimensionError
from .tensor import Array, as_array, make_result

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Array:
    a = as_array(a)
    b = as_array(b, like=a)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(data, (a, b), bw)


def sub(a, b) -> Array:
    a = as_array(a)
    b = as_array(b, like=a)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return make_result(data, (a, b), bw)


def mul(a, b) -> Array:
    a = as_array(a)
    b = as_array(b, like=a)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(data, (a, b), bw)


def scale(x: Array, s: float) -> Array:
    x = as_array(x)
    s = x.dtype.type(s)
    return make_result(x.data * s, (x,), lambda g: (g * s,))


def gelu(x: Array) -> Array:
    """Exact (erf-based) GELU."""
    x = as_array(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = (x.data * cdf).astype(x.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype, copy=False),)

    return make_result(data, (x,), bw)


# ---------------------------------------------------------------------------
# reductions and shape plumbing
# ---------------------------------------------------------------------------

def sum(x: Array) -> Array:  # noqa: A001 - mirrors numpy naming
    x = as_array(x)
    return make_result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                       lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Array) -> Array:
    x = as_array(x)
    n = x.size

    return make_result(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                       lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def reshape(x: Array, shape) -> Array:
    x = as_array(x)
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Array, axes) -> Array:
    x = as_array(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                       lambda g: (g.transpose(inv),))


def swap_hw(x: Array) -> Array:
    """(B, H, W, C) -> (B, W, H, C)."""
    return transpose(x, (0, 2, 1, 3))


def concat(xs, axis: int = -1) -> Array:
    xs = [as_array(x) for x in xs]
    axis = axis % xs[0].ndim
    sizes = [x.shape[axis] for x in xs]
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[x.shape for x in xs]}") from exc
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return make_result(data, tuple(xs), bw)


def slice_last(x: Array, start: int, stop: int) -> Array:
    """x[..., start:stop]."""
    x = as_array(x)

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return make_result(x.data[..., start:stop].copy(), (x,), bw)


def global_avg_pool(x: Array) -> Array:
    """(B, H, W, C) -> (B, C)."""
    x = as_array(x)
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects (B,H,W,C), got {x.shape}")
    B, H, W, C = x.shape
    n = H * W

    def bw(g):
        return (np.broadcast_to(g[:, None, None, :] / n, x.shape).astype(x.dtype),)

    return make_result(x.data.mean(axis=(1, 2)), (x,), bw)


def upsample_nearest2x(x: Array) -> Array:
    """Nearest-neighbour 2x spatial upsampling of (B, H, W, C)."""
    x = as_array(x)
    data = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def bw(g):
        B, H2, W2, C = g.shape
        return (g.reshape(B, H2 // 2, 2, W2 // 2, 2, C).sum(axis=(2, 4)),)

    return make_result(data, (x,), bw)


# ---------------------------------------------------------------------------
# dense layers
# ---------------------------------------------------------------------------

def affine(x: Array, weight: Array, bias: Array | None = None) -> Array:
    """y[..., o] = sum_i x[..., i] * weight[i, o] + bias[o]."""
    x = as_array(x)
    weight = as_array(weight, like=x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"affine: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None:
        bias = as_array(bias, like=x)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"affine: bias {bias.shape} incompatible with weight {weight.shape}")
    c_in, c_out = weight.shape
    x2 = x.data.reshape(-1, c_in)
    y = x2 @ weight.data
    if bias is not None:
        y = y + bias.data
    data = y.reshape(x.shape[:-1] + (c_out,))

    def bw(g):
        g2 = g.reshape(-1, c_out)
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(data, inputs, bw)


def layer_norm(x: Array, gamma: Array, beta: Array, eps: float = 1e-6) -> Array:
    """Normalise each token over its channel axis, then scale and shift."""
    x = as_array(x)
    gamma = as_array(gamma, like=x)
    beta = as_array(beta, like=x)
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape}/beta {beta.shape} vs channels {C}")
    if eps <= 0:
        raise ArgumentError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    data = xhat * gamma.data + beta.data

    def bw(g):
        axes = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_result(data.astype(x.dtype, copy=False), (x, gamma, beta), bw)


def softmax_groups(x: Array, k: int) -> Array:
    """Softmax across ``k`` competing entries that share a channel index.

    The last axis is read as ``k`` consecutive blocks of ``C`` channels; for
    each channel ``c`` the entries ``x[..., j*C + c]`` for ``j < k`` are
    normalised together.
    """
    x = as_array(x)
    if k < 1:
        raise ArgumentError(f"softmax_groups: k must be >= 1, got {k}")
    if x.shape[-1] % k:
        raise DimensionError(f"softmax_groups: last extent {x.shape[-1]} not divisible by k={k}")
    C = x.shape[-1] // k
    z = x.data.reshape(x.shape[:-1] + (k, C))
    z = z - z.max(axis=-2, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-2, keepdims=True)

    def bw(g):
        g3 = g.reshape(s.shape)
        gx = s * (g3 - (g3 * s).sum(axis=-2, keepdims=True))
        return (gx.reshape(x.shape),)

    return make_result(s.reshape(x.shape), (x,), bw)


def cross_entropy(logits: Array, labels, smoothing: float = 0.0) -> Array:
    """Mean label-smoothed cross entropy; ``labels`` are integer class ids."""
    logits = as_array(logits)
    labels = np.asarray(labels.data if isinstance(labels, Array) else labels).astype(np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    B, N = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= N):
        raise ArgumentError(f"cross_entropy: label index out of range [0, {N})")
    if not 0.0 <= smoothing < 1.0:
        raise ArgumentError("cross_entropy: smoothing must lie in [0, 1)")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    target = np.full((B, N), smoothing / N, dtype=logits.dtype)
    target[np.arange(B), labels] += 1.0 - smoothing
    loss = -(target * logp).sum() / B

    def bw(g):
        return ((np.exp(logp) - target) * (g / B),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------

def gather_interp_1d(x: Array, offsets: Array, axis: str, group_size: int | None = None) -> Array:
    """Per-channel fractional gather along one spatial axis.

    For ``axis="width"`` the output at ``(b, i, j, c)`` samples ``x`` at the
    column ``p = clamp(j + offsets[b, i, j, c // group_size], 0, W - 1)``
    by linear interpolation between ``floor(p)`` and ``floor(p) + 1``.
    Offset gradients are zero where ``p`` was clamped; at integer ``p`` the
    right-hand derivative is used so zero offsets still receive gradient.
    """
    x = as_array(x)
    offsets = as_array(offsets, like=x)
    if x.ndim != 4 or offsets.ndim != 4 or x.shape[:3] != offsets.shape[:3]:
        raise DimensionError(f"gather_interp_1d: x {x.shape} vs offsets {offsets.shape}")
    C, G = x.shape[3], offsets.shape[3]
    if G < 1 or C % G:
        raise ArgumentError(f"gather_interp_1d: {G} offset groups do not divide {C} channels")
    if group_size is None:
        group_size = C // G
    if group_size * G != C:
        raise ArgumentError(f"gather_interp_1d: group_size {group_size} x {G} groups != {C} channels")
    if axis not in ("width", "height"):
        raise ArgumentError(f"gather_interp_1d: axis must be 'width' or 'height', got {axis!r}")

    if axis == "height":
        xs = x.data.transpose(0, 2, 1, 3)
        os_ = offsets.data.transpose(0, 2, 1, 3)
    else:
        xs, os_ = x.data, offsets.data
    B, A, L, _ = xs.shape  # gather runs along L

    pos = np.arange(L, dtype=x.dtype).reshape(1, 1, L, 1) + os_
    bad = ~np.isfinite(pos)
    p = np.clip(np.where(bad, 0, pos), 0, L - 1)  # NaN offsets sample index 0, then poison below
    inside = (pos >= 0) & (pos <= L - 1)
    lo = np.floor(p)
    t = (p - lo).astype(x.dtype)
    lo = lo.astype(np.intp)
    hi = np.minimum(lo + 1, L - 1)
    lo_c = np.repeat(lo, group_size, axis=3)
    hi_c = np.repeat(hi, group_size, axis=3)
    t_c = np.repeat(t, group_size, axis=3)
    x_lo = np.take_along_axis(xs, lo_c, axis=2)
    x_hi = np.take_along_axis(xs, hi_c, axis=2)
    out = x_lo + t_c * (x_hi - x_lo)
    out = np.where(t_c == 0, x_lo, out)  # keeps the integer-offset path bit-exact
    if bad.any():
        out = np.where(np.repeat(bad, group_size, axis=3), np.nan, out).astype(x.dtype)

    def bw(g):
        gs = g.transpose(0, 2, 1, 3) if axis == "height" else g
        gx = None
        if x.requires_grad:
            base = (np.arange(B).reshape(B, 1, 1, 1) * A + np.arange(A).reshape(1, A, 1, 1)) * L
            cidx = np.arange(C).reshape(1, 1, 1, C)
            flat_lo = ((base + lo_c) * C + cidx).ravel()
            flat_hi = ((base + hi_c) * C + cidx).ravel()
            n = B * A * L * C
            acc = np.bincount(flat_lo, weights=(gs * (1 - t_c)).ravel(), minlength=n)
            acc += np.bincount(flat_hi, weights=(gs * t_c).ravel(), minlength=n)
            gx = acc.reshape(xs.shape).astype(x.dtype)
            if axis == "height":
                gx = gx.transpose(0, 2, 1, 3)
        go = None
        if offsets.requires_grad:
            d = (gs * (x_hi - x_lo)).reshape(B, A, L, G, group_size).sum(axis=-1)
            d = np.where(inside, d, 0).astype(x.dtype)
            go = d.transpose(0, 2, 1, 3) if axis == "height" else d
        return gx, go

    if axis == "height":
        out = out.transpose(0, 2, 1, 3)
    return make_result(np.ascontiguousarray(out), (x, offsets), bw)


def depthwise_conv2d(x: Array, kernel: Array) -> Array:
    """Per-channel k x k convolution, stride 1, zero padding (k-1)/2."""
    x = as_array(x)
    kernel = as_array(kernel, like=x)
    if kernel.ndim != 3 or kernel.shape[0] != kernel.shape[1]:
        raise DimensionError(f"depthwise_conv2d: kernel must be (k,k,C), got {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ArgumentError(f"depthwise_conv2d: kernel size must be odd, got {k}")
    if x.ndim != 4 or kernel.shape[2] != x.shape[3]:
        raise DimensionError(f"depthwise_conv2d: x {x.shape} vs kernel {kernel.shape}")
    B, H, W, C = x.shape
    p = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    out = np.zeros_like(x.data)
    for di in range(k):
        for dj in range(k):
            out += xp[:, di:di + H, dj:dj + W, :] * kernel.data[di, dj]

    def bw(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernel.data)
        for di in range(k):
            for dj in range(k):
                gxp[:, di:di + H, dj:dj + W, :] += g * kernel.data[di, dj]
                gk[di, dj] = (g * xp[:, di:di + H, dj:dj + W, :]).sum(axis=(0, 1, 2))
        return gxp[:, p:p + H, p:p + W, :], gk

    return make_result(out, (x, kernel), bw)


def conv_output_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Array, kernel: Array, bias: Array | None = None, stride: int = 1,
           padding: int = 0) -> Array:
    """Dense cross-correlation; kernel is (k, k, C_in, C_out)."""
    x = as_array(x)
    kernel = as_array(kernel, like=x)
    if kernel.ndim != 4 or x.ndim != 4 or kernel.shape[2] != x.shape[3]:
        raise DimensionError(f"conv2d: x {x.shape} vs kernel {kernel.shape}")
    kh, kw, c_in, c_out = kernel.shape
    B, H, W, _ = x.shape
    Ho = conv_output_extent(H, kh, stride, padding)
    Wo = conv_output_extent(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ArgumentError(
            f"conv2d: output extent {Ho}x{Wo} < 1 for input {H}x{W}, k={kh}, s={stride}, p={padding}")
    if bias is not None:
        bias = as_array(bias, like=x)
        if bias.shape != (c_out,):
            raise DimensionError(f"conv2d: bias {bias.shape} vs C_out {c_out}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    # (B, Ho, Wo, C_in, kh, kw) -> (B, Ho, Wo, kh, kw, C_in)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, kh * kw * c_in)
    wmat = kernel.data.reshape(kh * kw * c_in, c_out)
    y = cols @ wmat
    if bias is not None:
        y = y + bias.data
    data = y.reshape(B, Ho, Wo, c_out)

    def bw(g):
        g2 = g.reshape(-1, c_out)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, Ho, Wo, kh, kw, c_in)
            gxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    gxp[:, di:di + stride * (Ho - 1) + 1:stride,
                        dj:dj + stride * (Wo - 1) + 1:stride, :] += gcols[:, :, :, di, dj, :]
            gx = gxp[:, padding:padding + H, padding:padding + W, :]
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(data, inputs, bw)


strided_conv2d = conv2d
