"""Real 2-D Fourier analysis/synthesis with amplitude/phase views.

Conventions (fixed by the test contract):
  - forward transform is unnormalized; the DC bin equals the sum of all
    spatial values,
  - the inverse carries the 1/(H*W) factor,
  - the half-width spectrum keeps W' = W//2 + 1 columns; the inverse
    enforces conjugate symmetry by construction (output is real by taking
    the real part of the reconstructed full spectrum),
  - phase of a zero-amplitude bin is 0, and so is its gradient.

The FFT itself is an iterative radix-2 Cooley-Tukey along each axis, with a
dense-DFT fallback for non power-of-two extents (desk-scale inputs, so the
O(N^2) fallback is never the bottleneck). Everything runs internally in
complex128; outputs are cast back to the input precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, record
from .ops import ShapeError

# Test hook: selftest fault injection multiplies the inverse normalization by
# this factor to prove the round-trip property actually detects breakage.
_INVERSE_NORM_FUDGE = 1.0


# ---------------------------------------------------------------------------
# raw complex transforms (plain ndarrays, complex128)
# ---------------------------------------------------------------------------

def _bit_reverse_permutation(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_last_axis(a, inverse):
    """FFT along the last axis of a complex128 array (unnormalized)."""
    n = a.shape[-1]
    if n == 1:
        return a.copy()
    sign = 1.0 if inverse else -1.0
    if n & (n - 1) == 0:
        out = a[..., _bit_reverse_permutation(n)].copy()
        m = 1
        while m < n:
            half = m
            m *= 2
            tw = np.exp(sign * 2j * np.pi * np.arange(half) / m)
            out = out.reshape(a.shape[:-1] + (n // m, m))
            even = out[..., :half]
            odd = out[..., half:] * tw
            out = np.concatenate([even + odd, even - odd], axis=-1)
            out = out.reshape(a.shape[:-1] + (n,))
        return out
    # dense DFT fallback for non power-of-two extents
    k = np.arange(n)
    mat = np.exp(sign * 2j * np.pi * np.outer(k, k) / n)
    return a @ mat


def _fft2(a, inverse=False):
    """Unnormalized 2-D FFT over the last two axes of a complex array."""
    a = np.asarray(a, dtype=np.complex128)
    a = _fft_last_axis(a, inverse)
    a = np.swapaxes(_fft_last_axis(np.swapaxes(a, -1, -2), inverse), -1, -2)
    return a


def dft2_naive(x):
    """Brute-force O(N^2) full 2-D DFT of a real array (..., H, W).

    Independent oracle: direct evaluation of the defining double sum, used
    only by tests and the selftest suite.
    """
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape[-2], x.shape[-1]
    out = np.zeros(x.shape, dtype=np.complex128)
    for u in range(H):
        for v in range(W):
            ph = np.exp(-2j * np.pi * (u * np.arange(H)[:, None] / H
                                       + v * np.arange(W)[None, :] / W))
            out[..., u, v] = (x * ph).sum(axis=(-2, -1))
    return out


# ---------------------------------------------------------------------------
# half-width complex spectrum
# ---------------------------------------------------------------------------

@dataclass
class ComplexSpectrum:
    """Half-width spectrum of a real (..., H, W) signal: W' = W//2 + 1
    columns, stored as separate real and imaginary tensors."""
    real: Tensor
    imag: Tensor
    source_width: int

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ShapeError("spectrum real/imag shape mismatch: "
                             f"{self.real.shape} vs {self.imag.shape}")
        wp = self.source_width // 2 + 1
        if self.real.shape[-1] != wp:
            raise ShapeError(
                f"spectrum has {self.real.shape[-1]} columns, expected "
                f"W//2+1 = {wp} for source width {self.source_width}")

    @property
    def shape(self):
        return self.real.shape


def _half_to_full(re, im, W):
    """Rebuild the full-width spectrum from the stored half by conjugate
    symmetry (symmetry is imposed, not assumed)."""
    H = re.shape[-2]
    Wp = re.shape[-1]
    full = np.zeros(re.shape[:-1] + (W,), dtype=np.complex128)
    full[..., :Wp] = re + 1j * im
    ui = (H - np.arange(H)) % H
    for v in range(Wp, W):
        full[..., v] = np.conj(full[..., ui, W - v])
    return full


def rfft2(x: Tensor) -> ComplexSpectrum:
    """Unnormalized forward real 2-D FFT per channel. Requires even W."""
    H, W = x.shape[-2], x.shape[-1]
    if H < 2 or W < 2:
        raise ShapeError(f"rfft2 needs H, W >= 2, got {H}x{W}")
    if W % 2 != 0:
        raise ShapeError(f"rfft2 requires even width, got W={W} "
                         "(half-spectrum bookkeeping assumes W' = W/2 + 1)")
    Wp = W // 2 + 1
    full = _fft2(x.data.astype(np.float64))
    half = full[..., :Wp]
    re = Tensor(half.real.astype(x.dtype))
    im = Tensor(half.imag.astype(x.dtype))

    def bwd(gre, gim):
        g = np.zeros(x.shape[:-1] + (W,), dtype=np.complex128)
        g[..., :Wp] = gre + 1j * gim
        gx = _fft2(g, inverse=True).real
        return (gx.astype(x.dtype),)

    record([re, im], [x], bwd)
    return ComplexSpectrum(re, im, W)


def irfft2(s: ComplexSpectrum) -> Tensor:
    """Exact inverse of rfft2 including the 1/(H*W) normalization."""
    W = s.source_width
    H = s.real.shape[-2]
    norm = _INVERSE_NORM_FUDGE / (H * W)
    full = _half_to_full(s.real.data.astype(np.float64),
                         s.imag.data.astype(np.float64), W)
    y = _fft2(full, inverse=True).real * norm
    out = Tensor(y.astype(s.real.dtype))

    Wp = W // 2 + 1
    colw = np.ones(Wp)
    colw[1:W - Wp + 1] = 2.0  # interior columns appear twice in the full grid

    def bwd(g):
        G = _fft2(g.astype(np.float64))[..., :Wp] * norm
        gre = (G.real * colw).astype(s.real.dtype)
        gim = (G.imag * colw).astype(s.imag.dtype)
        return (gre, gim)

    record([out], [s.real, s.imag], bwd)
    return out


# ---------------------------------------------------------------------------
# polar views
# ---------------------------------------------------------------------------

def amplitude(s: ComplexSpectrum) -> Tensor:
    """Per-bin modulus of the spectrum (>= 0)."""
    re, im = s.real, s.imag
    a = np.sqrt(re.data ** 2 + im.data ** 2)
    out = Tensor(a)
    safe = np.where(a > 0, a, 1.0)

    def bwd(g):
        return (g * re.data / safe, g * im.data / safe)

    record([out], [re, im], bwd)
    return out


def phase(s: ComplexSpectrum) -> Tensor:
    """Per-bin angle in (-pi, pi]; zero bins get phase 0 and zero gradient."""
    re, im = s.real, s.imag
    r2 = re.data ** 2 + im.data ** 2
    ang = np.arctan2(im.data, re.data)
    ang = np.where(ang == -np.pi, np.pi, ang)
    ang = np.where(r2 == 0, 0.0, ang)
    out = Tensor(ang.astype(re.dtype))
    safe = np.where(r2 > 0, r2, 1.0)
    zero = r2 == 0

    def bwd(g):
        gre = np.where(zero, 0.0, -g * im.data / safe)
        gim = np.where(zero, 0.0, g * re.data / safe)
        return (gre.astype(re.dtype), gim.astype(im.dtype))

    record([out], [re, im], bwd)
    return out


def polar_recompose(amp: Tensor, phi: Tensor, source_width: int) -> ComplexSpectrum:
    """Rebuild a complex spectrum from modulus and angle: A * e^{j*phi}."""
    if amp.shape != phi.shape:
        raise ShapeError(f"polar_recompose shape mismatch: {amp.shape} vs {phi.shape}")
    if np.any(amp.data < 0):
        raise ShapeError("polar_recompose requires non-negative amplitude")
    c, s_ = np.cos(phi.data), np.sin(phi.data)
    re = Tensor(amp.data * c)
    im = Tensor(amp.data * s_)

    def bwd(gre, gim):
        ga = gre * c + gim * s_
        gp = amp.data * (gim * c - gre * s_)
        return (ga, gp)

    record([re, im], [amp, phi], bwd)
    return ComplexSpectrum(re, im, source_width)
