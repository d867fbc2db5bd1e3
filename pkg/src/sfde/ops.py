"""Differentiable dense kernels: exactly the operation set the network needs.

Every function takes and returns `Tensor`s, computes with numpy, and registers
its backward rule with the active `Tape` (if any). Kernels are pure functions
of their inputs and safe to call concurrently; only batch-norm running
statistics are mutated, and only in train mode.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .autodiff import Parameter, Tensor, record


class ShapeError(ValueError):
    """Shape/precondition violation with a diagnostic message."""


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gdim, sdim) in enumerate(zip(g.shape, shape)):
        if sdim == 1 and gdim != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    out = Tensor(a.data + b.data)
    record([out], [a, b],
           lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    out = Tensor(a.data - b.data)
    record([out], [a, b],
           lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))
    return out


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    out = Tensor(a.data * b.data)
    record([out], [a, b],
           lambda g: (_unbroadcast(g * b.data, a.shape),
                      _unbroadcast(g * a.data, b.shape)))
    return out


def neg(a):
    out = Tensor(-a.data)
    record([out], [a], lambda g: (-g,))
    return out


def scale(a, c: float):
    out = Tensor(a.data * c)
    record([out], [a], lambda g: (g * c,))
    return out


def add_const(a, c: float):
    out = Tensor(a.data + c)
    record([out], [a], lambda g: (g,))
    return out


def exp(a):
    out = Tensor(np.exp(a.data))
    record([out], [a], lambda g: (g * out.data,))
    return out


def log(a):
    out = Tensor(np.log(a.data))
    record([out], [a], lambda g: (g / a.data,))
    return out


def pow_const(a, c: float):
    out = Tensor(a.data ** c)
    record([out], [a], lambda g: (g * c * a.data ** (c - 1.0),))
    return out


def clamp_min(a, lo: float):
    mask = a.data > lo
    out = Tensor(np.maximum(a.data, lo))
    record([out], [a], lambda g: (g * mask,))
    return out


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a):
    mask = a.data > 0
    out = Tensor(a.data * mask)
    record([out], [a], lambda g: (g * mask,))
    return out


def sigmoid(a):
    y = np.where(a.data >= 0,
                 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    out = Tensor(y)
    record([out], [a], lambda g: (g * out.data * (1.0 - out.data),))
    return out


def gelu(a):
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    out = Tensor(x * phi)
    dens = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    record([out], [a], lambda g: (g * (phi + x * dens),))
    return out


def softplus(a):
    x = a.data
    y = np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(x)))
    out = Tensor(y)
    sig = 1.0 / (1.0 + np.exp(-np.clip(x, -60, 60)))
    record([out], [a], lambda g: (g * sig,))
    return out


def softmax(a, axis=-1):
    """Max-subtracted stable softmax along `axis`; rows sum to 1."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    record([out], [a], bwd)
    return out


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    out = Tensor(y)

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    record([out], [a], bwd)
    return out


# ---------------------------------------------------------------------------
# reductions / structure
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    record([out], [a], bwd)
    return out


def mean_(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    record([out], [a], lambda g: (g.reshape(a.shape),))
    return out


def transpose(a, axes):
    out = Tensor(np.transpose(a.data, axes))
    inv = np.argsort(axes)
    record([out], [a], lambda g: (np.transpose(g, inv),))
    return out


def concat(parts, axis=0):
    parts = list(parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.array(piece, copy=True)
                     for piece in np.split(g, splits, axis=axis))

    record([out], parts, bwd)
    return out


def slice_(a, idx):
    """Static basic slicing (no advanced indexing)."""
    out = Tensor(np.array(a.data[idx], copy=True))

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    record([out], [a], bwd)
    return out


def matmul(a, b):
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    record([out], [a, b], bwd)
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_out_size(n, k, stride, padding, dilation):
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, w, b=None, stride=1, padding=0, dilation=1, groups=1):
    """2-D cross-correlation. x: (C,H,W) or (N,C,H,W); w: (O, C/groups, K, K).

    With stride 1 and padding = dilation*(K-1)/2 (K odd) the spatial size is
    preserved.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    N, C, H, W = xd.shape
    O, Cg, Kh, Kw = w.shape
    if Cg * groups != C or O % groups != 0:
        raise ShapeError(
            f"conv2d channel mismatch: input C={C}, weight expects "
            f"{Cg}*groups={Cg * groups} (groups={groups}, O={O})")
    s, p, d = stride, padding, dilation
    Ho = _conv_out_size(H, Kh, s, p, d)
    Wo = _conv_out_size(W, Kw, s, p, d)
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d empty output for input {H}x{W}, K={Kh}, "
                         f"stride={s}, padding={p}, dilation={d}")

    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    ih = s * np.arange(Ho)[:, None] + d * np.arange(Kh)[None, :]
    iw = s * np.arange(Wo)[:, None] + d * np.arange(Kw)[None, :]
    G, Og = groups, O // groups
    wg = w.data.reshape(G, Og, Cg, Kh, Kw)

    patches = xp[:, :, ih[:, :, None, None], iw[None, None, :, :]]
    pg = patches.reshape(N, G, Cg, Ho, Kh, Wo, Kw)
    out_d = np.einsum("ngchkwl,gockl->ngohw", pg, wg, optimize=True)
    out_d = out_d.reshape(N, O, Ho, Wo)
    if b is not None:
        out_d = out_d + b.data[:, None, None]
    out = Tensor(out_d[0] if squeeze else out_d)

    def bwd(g):
        gd = g[None] if squeeze else g
        gog = gd.reshape(N, G, Og, Ho, Wo)
        patches_b = xp[:, :, ih[:, :, None, None], iw[None, None, :, :]]
        pgb = patches_b.reshape(N, G, Cg, Ho, Kh, Wo, Kw)
        gw = np.einsum("ngohw,ngchkwl->gockl", gog, pgb, optimize=True)
        gw = gw.reshape(O, Cg, Kh, Kw)
        gb = gd.sum(axis=(0, 2, 3)) if b is not None else None
        gxp = np.zeros_like(xp)
        for a_ in range(Kh):
            rows = slice(a_ * d, a_ * d + s * (Ho - 1) + 1, s)
            for b_ in range(Kw):
                cols = slice(b_ * d, b_ * d + s * (Wo - 1) + 1, s)
                contrib = np.einsum("ngohw,goc->ngchw", gog,
                                    wg[:, :, :, a_, b_], optimize=True)
                gxp[:, :, rows, cols] += contrib.reshape(N, C, Ho, Wo)
        gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        gx = gx[0] if squeeze else gx
        if b is not None:
            return (gx, gw, gb)
        return (gx, gw)

    record([out], [x, w] + ([b] if b is not None else []), bwd)
    return out


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over axis 1. x: (N,C) or (N,C,H,W).

    Train mode uses batch statistics (and requires batch size >= 2); eval
    mode uses the running statistics, which train mode updates in place.
    """
    xd = x.data
    if xd.ndim == 2:
        axes, view = (0,), (1, -1)
    elif xd.ndim == 4:
        axes, view = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ShapeError(f"batch_norm expects (N,C) or (N,C,H,W), got {xd.shape}")
    if training and xd.shape[0] < 2:
        raise ShapeError("batch_norm in train mode needs batch size >= 2 "
                         "(variance undefined for a single sample)")

    def ch(v):
        return v.reshape(view)

    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        n = xd.size // xd.shape[1]
        unbiased = var * n / max(1, n - 1)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= (1.0 - momentum)
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - ch(mu)) * ch(inv)
    out = Tensor(xhat * ch(gamma.data) + ch(beta.data))

    def bwd(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * ch(gamma.data)
        if training:
            n = xd.size // xd.shape[1]
            gx = ch(inv) / n * (
                n * gxhat
                - gxhat.sum(axis=axes).reshape(view)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(view))
        else:
            gx = gxhat * ch(inv)
        return (gx, ggamma, gbeta)

    record([out], [x, gamma, beta], bwd)
    return out


# ---------------------------------------------------------------------------
# pooling / resampling
# ---------------------------------------------------------------------------

def _pool_bounds(n, out):
    """Floor/ceil partition: cell i covers floor(i*n/out) .. ceil((i+1)*n/out)-1."""
    starts = [(i * n) // out for i in range(out)]
    ends = [-((-(i + 1) * n) // out) for i in range(out)]
    return starts, ends


def adaptive_avg_pool(x, out_h, out_w):
    """Mean over contiguous windows partitioning the input. x: (...,H,W)."""
    H, W = x.shape[-2], x.shape[-1]
    if out_h < 1 or out_w < 1:
        raise ShapeError("adaptive_avg_pool output extents must be positive")
    if out_h > H or out_w > W:
        raise ShapeError(f"adaptive_avg_pool output {out_h}x{out_w} exceeds "
                         f"input {H}x{W}")
    hs, he = _pool_bounds(H, out_h)
    ws, we = _pool_bounds(W, out_w)
    out_d = np.empty(x.shape[:-2] + (out_h, out_w), dtype=x.dtype)
    for i in range(out_h):
        for j in range(out_w):
            out_d[..., i, j] = x.data[..., hs[i]:he[i], ws[j]:we[j]].mean(axis=(-2, -1))
    out = Tensor(out_d)

    def bwd(g):
        gx = np.zeros_like(x.data)
        for i in range(out_h):
            for j in range(out_w):
                cnt = (he[i] - hs[i]) * (we[j] - ws[j])
                gx[..., hs[i]:he[i], ws[j]:we[j]] += g[..., i:i + 1, j:j + 1] / cnt
        return (gx,)

    record([out], [x], bwd)
    return out


def _interp_weights(n_in, n_out, dtype):
    """align-corners-false source indices and lerp weights for one axis."""
    src = (np.arange(n_out, dtype=dtype) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = (src - i0).astype(dtype)
    return i0, i1, w


def bilinear_upsample(x, out_h, out_w):
    """align-corners-false bilinear interpolation; constants map to constants."""
    H, W = x.shape[-2], x.shape[-1]
    if out_h < H or out_w < W:
        raise ShapeError(f"bilinear_upsample target {out_h}x{out_w} smaller "
                         f"than input {H}x{W}")
    i0, i1, wh = _interp_weights(H, out_h, x.dtype.type)
    j0, j1, ww = _interp_weights(W, out_w, x.dtype.type)

    rows = x.data[..., i0, :] * (1.0 - wh)[:, None] + x.data[..., i1, :] * wh[:, None]
    out_d = rows[..., :, j0] * (1.0 - ww) + rows[..., :, j1] * ww
    out = Tensor(out_d)

    def bwd(g):
        grows = np.zeros(x.shape[:-2] + (out_h, W), dtype=g.dtype)
        np.add.at(grows, (Ellipsis, j0), g * (1.0 - ww))
        np.add.at(grows, (Ellipsis, j1), g * ww)
        gx = np.zeros_like(x.data)
        grows_t = np.swapaxes(grows, -1, -2)
        gx_t = np.swapaxes(gx, -1, -2)
        np.add.at(gx_t, (Ellipsis, i0), grows_t * (1.0 - wh))
        np.add.at(gx_t, (Ellipsis, i1), grows_t * wh)
        return (np.swapaxes(gx_t, -1, -2),)

    record([out], [x], bwd)
    return out


# ---------------------------------------------------------------------------
# generalized mean pooling
# ---------------------------------------------------------------------------

GEM_CLAMP = 1e-6


def gem_pool(x, p):
    """Per-channel power mean over H,W: (mean(clamp(x)^p))^(1/p). x: (...,H,W).

    Inputs are clamped below at GEM_CLAMP so fractional powers stay defined;
    p may be a learnable scalar Parameter and must be >= 1.
    """
    p_t = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=x.dtype))
    pv = float(p_t.data)
    if pv < 1.0:
        raise ShapeError(f"gem_pool exponent must be >= 1, got {pv}")
    xc = np.maximum(x.data, GEM_CLAMP)
    mask = x.data > GEM_CLAMP
    n = x.shape[-2] * x.shape[-1]
    xp = xc ** pv
    m = xp.mean(axis=(-2, -1), keepdims=True)
    y = m ** (1.0 / pv)
    out = Tensor(y)

    def bwd(g):
        gx = g * m ** (1.0 / pv - 1.0) * xc ** (pv - 1.0) / n
        gx = gx * mask
        lx = np.log(xc)
        dy_dp = y * (-np.log(m) / pv ** 2
                     + (xp * lx).mean(axis=(-2, -1), keepdims=True) / (pv * m))
        gp = np.asarray((g * dy_dp).sum(), dtype=p_t.dtype).reshape(p_t.shape)
        return (gx, gp)

    record([out], [x, p_t], bwd)
    return out


# ---------------------------------------------------------------------------
# dropout / normalization helpers
# ---------------------------------------------------------------------------

def dropout(x, rate, rng):
    """Inverted dropout. Identity when rate == 0 or rng is None (eval)."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    out = Tensor(x.data * keep)
    record([out], [x], lambda g: (g * keep,))
    return out


def l2_normalize(x, axis=-1, eps=1e-12):
    n2 = sum_(mul(x, x), axis=axis, keepdims=True)
    inv = pow_const(add_const(n2, eps), -0.5)
    return mul(x, inv)
