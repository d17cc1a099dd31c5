"""Image quality metrics: MSE, PSNR, SSIM and LoG sharpness.

The ``*_batch`` helpers work on ``(N, H, W)`` float arrays and return one value
per item; those with a ``_grad`` suffix also return the gradient with respect
to the first argument. The Image-level functions wrap them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imgcore import Image

PSNR_CAP_DB = 100.0


# ---------------------------------------------------------------------------
# Filtering primitives (valid-region cross-correlation and its adjoint)
# ---------------------------------------------------------------------------


def correlate_valid(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid 2-D cross-correlation over the last two axes of ``x``."""
    win = sliding_window_view(x, kernel.shape, axis=(-2, -1))
    return np.tensordot(win, kernel, axes=([-2, -1], [0, 1]))


def correlate_valid_adjoint(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`correlate_valid`: full convolution of ``g``."""
    kh, kw = kernel.shape
    pad = [(0, 0)] * (g.ndim - 2) + [(kh - 1, kh - 1), (kw - 1, kw - 1)]
    return correlate_valid(np.pad(g, pad), kernel[::-1, ::-1])


def _sep_valid(x, g):
    # separable valid filter, rows then columns
    y = np.tensordot(sliding_window_view(x, g.size, axis=-1), g, axes=([-1], [0]))
    y = np.tensordot(sliding_window_view(y, g.size, axis=-2), g, axes=([-1], [0]))
    return y


def _sep_valid_adjoint(gr, g):
    k = g.size
    pad = [(0, 0)] * (gr.ndim - 2) + [(k - 1, k - 1), (k - 1, k - 1)]
    return _sep_valid(np.pad(gr, pad), g[::-1])


# ---------------------------------------------------------------------------
# MSE / PSNR
# ---------------------------------------------------------------------------


def _check_same(a: Image, b: Image):
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")


def mse(a: Image, b: Image) -> float:
    _check_same(a, b)
    return float(np.mean((a.data - b.data) ** 2))


def psnr_from_mse(m, max_val=1.0, cap=PSNR_CAP_DB):
    m = np.asarray(m, dtype=np.float64)
    with np.errstate(divide="ignore"):
        val = 10.0 * np.log10(max_val**2 / m)
    return np.where(m > 0, np.minimum(val, cap), cap)


def psnr(a: Image, b: Image, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give 100 dB."""
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    return float(psnr_from_mse(mse(a, b), max_val))


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("SSIM window must be odd and >= 3")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    def gaussian(self) -> np.ndarray:
        r = np.arange(self.window) - self.window // 2
        g = np.exp(-(r**2) / (2 * self.sigma**2))
        return g / g.sum()


def _ssim_terms(x, y, p: SsimParams):
    g = p.gaussian()
    mx, my = _sep_valid(x, g), _sep_valid(y, g)
    exx, eyy, exy = _sep_valid(x * x, g), _sep_valid(y * y, g), _sep_valid(x * y, g)
    a1 = 2 * mx * my + p.c1
    a2 = 2 * (exy - mx * my) + p.c2
    b1 = mx * mx + my * my + p.c1
    b2 = (exx - mx * mx) + (eyy - my * my) + p.c2
    return g, mx, my, a1, a2, b1, b2


def _check_window(shape, p):
    if shape[-1] < p.window or shape[-2] < p.window:
        raise ValueError(f"SSIM window {p.window} larger than image {shape[-2:]}")


def ssim_batch(x: np.ndarray, y: np.ndarray, p: SsimParams = SsimParams()) -> np.ndarray:
    """Mean SSIM per item over the valid region; ``x, y`` are ``(N, H, W)``."""
    _check_window(x.shape, p)
    _, _, _, a1, a2, b1, b2 = _ssim_terms(x, y, p)
    return ((a1 * a2) / (b1 * b2)).mean(axis=(-2, -1))


def ssim_batch_grad(x: np.ndarray, y: np.ndarray, p: SsimParams = SsimParams()):
    """Per-item mean SSIM and its gradient with respect to ``x``."""
    _check_window(x.shape, p)
    g, mx, my, a1, a2, b1, b2 = _ssim_terms(x, y, p)
    den = b1 * b2
    s = a1 * a2 / den
    n = s.shape[-1] * s.shape[-2]
    # partials of the SSIM map w.r.t. mean(x), E[x^2] and E[xy]
    d_mx = ((2 * my * a2 - 2 * my * a1) - s * (2 * mx * b2 - 2 * mx * b1)) / den / n
    d_exx = -s * b1 / den / n
    d_exy = 2 * a1 / den / n
    grad = (
        _sep_valid_adjoint(d_mx, g)
        + 2 * x * _sep_valid_adjoint(d_exx, g)
        + y * _sep_valid_adjoint(d_exy, g)
    )
    return s.mean(axis=(-2, -1)), grad


def ssim(a: Image, b: Image, p: SsimParams = SsimParams()) -> float:
    """Structural similarity of two single-channel images."""
    _check_same(a, b)
    if a.channels != 1:
        raise ValueError("SSIM is computed on single-channel (Y) images")
    return float(ssim_batch(a.data, b.data, p)[0])


# ---------------------------------------------------------------------------
# Laplacian of Gaussian sharpness
# ---------------------------------------------------------------------------


def log_value(x, y, sigma):
    """Continuous LoG(x, y) for Gaussian std-dev ``sigma``."""
    q = (np.asarray(x, float) ** 2 + np.asarray(y, float) ** 2) / (2 * sigma**2)
    return -1.0 / (np.pi * sigma**4) * (1 - q) * np.exp(-q)


@dataclass(frozen=True)
class LogKernel:
    sigma: float
    size: int
    weights: np.ndarray
    raw: np.ndarray


def log_kernel(sigma: float = 1.4, size: int = 9) -> LogKernel:
    """Sampled LoG kernel, shifted so its coefficients sum to zero."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    r = np.arange(size) - size // 2
    raw = log_value(r[None, :], r[:, None], sigma)
    weights = raw - raw.mean()
    raw.setflags(write=False)
    weights.setflags(write=False)
    return LogKernel(sigma, size, weights, raw)


# samples are scaled to the 8-bit range before filtering
SHARPNESS_GAIN = 255.0


def sharpness_batch(x: np.ndarray, k: LogKernel) -> np.ndarray:
    if x.shape[-1] < k.size or x.shape[-2] < k.size:
        raise ValueError(f"image {x.shape[-2:]} smaller than {k.size}x{k.size} kernel")
    r = correlate_valid(SHARPNESS_GAIN * x, k.weights)
    return np.sqrt(np.mean(r * r, axis=(-2, -1)))


def sharpness_batch_grad(x: np.ndarray, k: LogKernel):
    if x.shape[-1] < k.size or x.shape[-2] < k.size:
        raise ValueError(f"image {x.shape[-2:]} smaller than {k.size}x{k.size} kernel")
    r = correlate_valid(SHARPNESS_GAIN * x, k.weights)
    n = r.shape[-1] * r.shape[-2]
    s = np.sqrt(np.mean(r * r, axis=(-2, -1)))
    safe = np.where(s > 0, s, 1.0)[..., None, None]
    dr = np.where(s[..., None, None] > 0, r / (n * safe), 0.0)
    return s, SHARPNESS_GAIN * correlate_valid_adjoint(dr, k.weights)


def sharpness(img: Image, kernel: LogKernel | None = None) -> float:
    """RMS LoG response of a single-channel image (valid region, 0..255 scale)."""
    if img.channels != 1:
        raise ValueError("sharpness expects a GrayY image")
    kernel = kernel or log_kernel()
    return float(sharpness_batch(img.data, kernel)[0])


def sharpness_delta(sr: Image, hr: Image, kernel: LogKernel | None = None) -> float:
    _check_same(sr, hr)
    return abs(sharpness(sr, kernel) - sharpness(hr, kernel))
