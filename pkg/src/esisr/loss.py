"""Sharpness-aware perceptual loss with analytic gradients.

Two forms are available:

``additive`` (the training default), one term per quality signal, each
oriented so that lower is better::

    w_sharp * |S(sr) - S(hr)| / (S(hr) + eps)
      + w_ssim * (1 - SSIM(sr, hr))
      + w_psnr * (1 - min(PSNR, cap) / cap)

``product``, the weighted product form ``w_sharp * |S(sr) - S(hr)| *
(w_ssim * SSIM + w_psnr * PSNR)``. It is kept for comparison only: it
rewards *worse* SSIM/PSNR once a sharpness gap exists, so it is not a
sensible objective on its own.

``S`` is the LoG sharpness from :mod:`esisr.metrics`. Batch losses are the
mean of the per-item losses.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .metrics import (
    PSNR_CAP_DB,
    LogKernel,
    SsimParams,
    log_kernel,
    sharpness_batch,
    sharpness_batch_grad,
    ssim_batch_grad,
)

EPS = 1e-6
_DB = 10.0 / np.log(10.0)


class LossForm(str, enum.Enum):
    ADDITIVE_MIN = "additive"
    LITERAL_PRODUCT = "product"


@dataclass(frozen=True)
class LossWeights:
    w_sharp: float = 0.5
    w_ssim: float = 0.25
    w_psnr: float = 0.25
    psnr_cap: float = PSNR_CAP_DB
    form: LossForm = LossForm.ADDITIVE_MIN

    def __post_init__(self):
        object.__setattr__(self, "form", LossForm(self.form))
        if min(self.w_sharp, self.w_ssim, self.w_psnr) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.psnr_cap <= 0:
            raise ValueError("psnr_cap must be positive")
        total = self.w_sharp + self.w_ssim + self.w_psnr
        if self.form is LossForm.ADDITIVE_MIN and abs(total - 1.0) > 1e-9:
            raise ValueError(f"additive loss weights must sum to 1, got {total}")

    @classmethod
    def normalized(cls, w_sharp, w_ssim, w_psnr, **kw) -> "LossWeights":
        """Rescale three non-negative weights so they sum to one."""
        total = w_sharp + w_ssim + w_psnr
        return cls(w_sharp / total, w_ssim / total, w_psnr / total, **kw)


@dataclass(frozen=True)
class LossBreakdown:
    sharp_delta: float  # mean |S(sr) - S(hr)|
    sharp_term: float  # mean normalised sharpness gap
    ssim: float
    psnr: float
    total: float


def _as_batch(t):
    t = np.asarray(t)
    if t.ndim == 4:
        if t.shape[1] != 1:
            raise ValueError(f"loss expects single-channel tensors, got {t.shape}")
        return t[:, 0]
    if t.ndim == 2:
        return t[None]
    return t


def _evaluate(sr, hr, w: LossWeights, k: LogKernel, ssim_params: SsimParams, need_grad: bool):
    if np.shape(sr) != np.shape(hr):
        raise ValueError(f"shape mismatch: {np.shape(sr)} vs {np.shape(hr)}")
    shape, dtype = np.shape(sr), np.asarray(sr).dtype
    x = _as_batch(sr).astype(np.float64)
    y = _as_batch(hr).astype(np.float64)
    n_items = x.shape[0]
    n_px = x.shape[1] * x.shape[2]

    s_sr, ds_sr = sharpness_batch_grad(x, k)
    s_hr = sharpness_batch(y, k)
    gap = s_sr - s_hr
    ss, dss = ssim_batch_grad(x, y, ssim_params)
    diff = x - y
    m = np.mean(diff * diff, axis=(1, 2))
    with np.errstate(divide="ignore"):
        ps_raw = np.where(m > 0, _DB * np.log(1.0 / np.where(m > 0, m, 1.0)), np.inf)
    capped = ps_raw >= w.psnr_cap
    ps = np.where(capped, w.psnr_cap, ps_raw)
    # d PSNR / d sr; zero where the cap is active
    dps = np.where(capped[:, None, None], 0.0, -_DB * 2 * diff / (n_px * np.where(m > 0, m, 1.0)[:, None, None]))

    if w.form is LossForm.ADDITIVE_MIN:
        sharp_term = np.abs(gap) / (s_hr + EPS)
        per_item = w.w_sharp * sharp_term + w.w_ssim * (1 - ss) + w.w_psnr * (1 - ps / w.psnr_cap)
        grad = None
        if need_grad:
            coef = (w.w_sharp * np.sign(gap) / (s_hr + EPS))[:, None, None]
            grad = coef * ds_sr - w.w_ssim * dss - (w.w_psnr / w.psnr_cap) * dps
    else:
        sharp_term = np.abs(gap)
        quality = w.w_ssim * ss + w.w_psnr * ps
        per_item = w.w_sharp * sharp_term * quality
        grad = None
        if need_grad:
            d_gap = (w.w_sharp * np.sign(gap) * quality)[:, None, None] * ds_sr
            d_q = (w.w_sharp * sharp_term)[:, None, None] * (w.w_ssim * dss + w.w_psnr * dps)
            grad = d_gap + d_q

    total = float(np.mean(per_item))
    report = LossBreakdown(
        sharp_delta=float(np.mean(np.abs(gap))),
        sharp_term=float(np.mean(sharp_term)),
        ssim=float(np.mean(ss)),
        psnr=float(np.mean(ps)),
        total=total,
    )
    if grad is not None:
        grad = (grad / n_items).reshape(shape).astype(dtype, copy=False)
    return report, grad


def perceptual_loss(sr, hr, w: LossWeights = LossWeights(), k: LogKernel | None = None,
                    ssim_params: SsimParams = SsimParams()):
    """Loss value and its gradient with respect to ``sr``.

    ``sr`` and ``hr`` are ``(B, 1, H, W)`` tensors (2-D or 3-D arrays are
    accepted too). The gradient has the shape and dtype of ``sr``.
    """
    report, grad = _evaluate(sr, hr, w, k or log_kernel(), ssim_params, need_grad=True)
    return report.total, grad


def loss_report(sr, hr, w: LossWeights = LossWeights(), k: LogKernel | None = None,
                ssim_params: SsimParams = SsimParams()) -> LossBreakdown:
    report, _ = _evaluate(sr, hr, w, k or log_kernel(), ssim_params, need_grad=False)
    return report


def mean_sharpness_gap(sr, hr, k: LogKernel | None = None) -> float:
    k = k or log_kernel()
    return float(np.mean(np.abs(sharpness_batch(_as_batch(sr), k) - sharpness_batch(_as_batch(hr), k))))
