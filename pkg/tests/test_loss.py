import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import uniform_filter

from esisr.imgcore import gray
from esisr.loss import EPS, LossForm, LossWeights, loss_report, mean_sharpness_gap, perceptual_loss
from esisr.metrics import log_kernel, psnr, sharpness, ssim
from helpers import fd_max_rel_error


def pair(seed=0, n=2, size=16, noise=0.05):
    rng = np.random.default_rng(seed)
    hr = rng.random((n, 1, size, size)) * 0.6 + 0.2
    sr = np.clip(hr + noise * rng.standard_normal(hr.shape), 0, 1)
    return sr, hr


def loss_oracle(sr, hr, w):
    """Per-item loss assembled from the public image metrics."""
    vals = []
    for a, b in zip(sr[:, 0], hr[:, 0]):
        s_a, s_b = sharpness(gray(a)), sharpness(gray(b))
        p = min(psnr(gray(a), gray(b)), w.psnr_cap)
        vals.append(w.w_sharp * abs(s_a - s_b) / (s_b + EPS) + w.w_ssim * (1 - ssim(gray(a), gray(b)))
                    + w.w_psnr * (1 - p / w.psnr_cap))
    return np.mean(vals)


class TestWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.w_sharp, w.w_ssim, w.w_psnr) == (0.5, 0.25, 0.25)
        assert w.form is LossForm.ADDITIVE_MIN

    def test_must_sum_to_one(self):
        with pytest.raises(ValueError):
            LossWeights(0.5, 0.5, 0.5)

    def test_negative(self):
        with pytest.raises(ValueError):
            LossWeights(1.5, -0.25, -0.25)

    def test_normalized(self):
        w = LossWeights.normalized(0, 1, 1)
        assert (w.w_sharp, w.w_ssim, w.w_psnr) == (0, 0.5, 0.5)

    def test_product_weights_unconstrained(self):
        LossWeights(1, 1, 1, form="product")


class TestAdditive:
    def test_matches_metric_oracle(self):
        sr, hr = pair()
        w = LossWeights()
        value, _ = perceptual_loss(sr, hr, w)
        np.testing.assert_allclose(value, loss_oracle(sr, hr, w), rtol=1e-9)

    def test_identity_is_zero(self):
        _, hr = pair()
        value, grad = perceptual_loss(hr, hr)
        assert value == pytest.approx(0, abs=1e-12)
        np.testing.assert_allclose(grad, 0, atol=1e-9)

    def test_monotone_in_noise(self):
        vals = [perceptual_loss(*pair(seed=1, noise=s))[0] for s in (0.01, 0.02, 0.04, 0.08, 0.16)]
        assert all(a < b for a, b in zip(vals, vals[1:]))

    @pytest.mark.parametrize("w", [LossWeights(), LossWeights.normalized(0, 1, 1), LossWeights(1, 0, 0),
                                   LossWeights(0, 0, 1, psnr_cap=30)])
    def test_gradient_finite_difference(self, w):
        sr, hr = pair(seed=2)
        _, grad = perceptual_loss(sr, hr, w)
        assert fd_max_rel_error(lambda: perceptual_loss(sr, hr, w)[0], sr, grad, n_coords=60, h=1e-6) < 1e-5

    def test_report_consistency(self):
        sr, hr = pair(seed=3)
        w = LossWeights()
        r = loss_report(sr, hr, w)
        assert r.total == perceptual_loss(sr, hr, w)[0]
        recombined = w.w_sharp * r.sharp_term + w.w_ssim * (1 - r.ssim) + w.w_psnr * (1 - r.psnr / w.psnr_cap)
        # linear in the per-item terms, so the batch means recombine exactly
        assert r.total == pytest.approx(recombined, rel=1e-12)
        assert r.sharp_delta == pytest.approx(mean_sharpness_gap(sr, hr))

    def test_ssim_only_identity(self):
        _, hr = pair(seed=9)
        value, grad = perceptual_loss(hr, hr, LossWeights(0, 1, 0))
        assert value == 0
        np.testing.assert_allclose(grad, 0, atol=1e-12)

    def test_blur_report(self):
        _, hr = pair(seed=10, n=1, size=24)
        blurred = hr.copy()
        blurred[0, 0] = uniform_filter(hr[0, 0], 3, mode="reflect")
        r = loss_report(blurred, hr)
        assert r.sharp_delta > 0 and r.ssim < 1
        ident = loss_report(hr, hr)
        assert (ident.ssim, ident.psnr, ident.sharp_delta) == (pytest.approx(1.0), 100.0, 0.0)

    def test_psnr_cap_has_zero_gradient(self):
        sr, hr = pair(seed=4, noise=1e-4)
        w = LossWeights(0, 0, 1, psnr_cap=40)
        value, grad = perceptual_loss(sr, hr, w)
        assert value == 0
        np.testing.assert_array_equal(grad, 0)

    def test_gradient_keeps_shape_and_dtype(self):
        sr, hr = pair(seed=5)
        _, g = perceptual_loss(sr.astype(np.float32), hr.astype(np.float32))
        assert g.shape == sr.shape and g.dtype == np.float32

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            perceptual_loss(np.zeros((1, 1, 16, 16)), np.zeros((1, 1, 16, 17)))

    def test_multichannel_rejected(self):
        with pytest.raises(ValueError):
            perceptual_loss(np.zeros((1, 3, 16, 16)), np.zeros((1, 3, 16, 16)))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_non_negative(self, seed):
        sr, hr = pair(seed=seed, n=1, noise=0.1)
        assert perceptual_loss(sr, hr)[0] >= 0


class TestProduct:
    def test_value(self):
        sr, hr = pair(seed=6)
        w = LossWeights(1.0, 0.5, 0.01, form="product")
        k = log_kernel()
        expected = np.mean([
            w.w_sharp * abs(sharpness(gray(a), k) - sharpness(gray(b), k))
            * (w.w_ssim * ssim(gray(a), gray(b)) + w.w_psnr * psnr(gray(a), gray(b)))
            for a, b in zip(sr[:, 0], hr[:, 0])
        ])
        np.testing.assert_allclose(perceptual_loss(sr, hr, w)[0], expected, rtol=1e-9)

    def test_gradient_finite_difference(self):
        sr, hr = pair(seed=7)
        w = LossWeights(1.0, 0.5, 0.01, form="product")
        _, grad = perceptual_loss(sr, hr, w)
        assert fd_max_rel_error(lambda: perceptual_loss(sr, hr, w)[0], sr, grad, n_coords=60, h=1e-6) < 1e-5

    def test_rewards_worse_quality(self):
        # with a sharpness gap present, lowering SSIM/PSNR lowers the product
        rng = np.random.default_rng(8)
        hr = rng.random((1, 1, 16, 16))
        w = LossWeights(1.0, 1.0, 0.0, form="product")
        near = np.clip(hr + 0.05 * rng.standard_normal(hr.shape), 0, 1)
        far = rng.random(hr.shape)
        assert loss_report(far, hr, w).ssim < loss_report(near, hr, w).ssim
        ratio_near = perceptual_loss(near, hr, w)[0] / loss_report(near, hr, w).sharp_term
        ratio_far = perceptual_loss(far, hr, w)[0] / loss_report(far, hr, w).sharp_term
        assert ratio_far < ratio_near
