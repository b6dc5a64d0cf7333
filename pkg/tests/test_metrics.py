from __future__ import annotations

import numpy as np
import pytest
from oracles import ssim_loop
from skimage.metrics import structural_similarity

from safa_motion_kit.metrics import PSNR_CAP_DB, capped_psnr, l1_distance, psnr, report, ssim


class TestL1:
    def test_identical(self, rng):
        a = rng.uniform(size=(8, 8, 3))
        assert l1_distance(a, a) == 0.0

    def test_constant_pair(self):
        assert l1_distance(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.5)) == 0.5

    def test_loop_oracle(self, rng):
        a, b = rng.uniform(size=(2, 5, 6, 3))
        total = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel()))
        assert l1_distance(a, b) == pytest.approx(total / a.size, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l1_distance(np.zeros((2, 2)), np.zeros((2, 3)))


class TestPSNR:
    def test_identical_is_infinite_and_capped(self, rng):
        a = rng.uniform(size=(8, 8))
        assert psnr(a, a) == float("inf")
        assert capped_psnr(psnr(a, a)) == PSNR_CAP_DB

    def test_mse_equal_peak_squared(self):
        assert psnr(np.zeros((3, 3)), np.full((3, 3), 2.0), peak=2.0) == 0.0

    def test_constant_offset(self):
        assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-12)

    def test_peak_must_be_positive(self):
        with pytest.raises(ValueError):
            psnr(np.zeros(2), np.zeros(2), peak=0.0)


class TestSSIM:
    def test_identical(self, rng):
        a = rng.uniform(size=(16, 16, 3))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)

    def test_constant(self):
        a = np.full((12, 12), 0.3)
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_negative_image_low(self, rng):
        a = rng.uniform(size=(20, 20, 3))
        assert ssim(a, 1.0 - a) < 0.5

    @pytest.mark.parametrize("seed", range(3))
    def test_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(size=(14, 15, 2))
        b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(ssim_loop(a, b), abs=1e-10)

    def test_matches_skimage(self, rng):
        a = rng.uniform(size=(24, 24, 3))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        ref = structural_similarity(
            a, b, channel_axis=2, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0
        )
        # skimage crops the half-window border, which equals full-window averaging
        assert ssim(a, b) == pytest.approx(ref, abs=1e-9)

    def test_symmetric_and_bounded(self, rng):
        a, b = rng.uniform(size=(2, 16, 16))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
        assert -1.0 <= ssim(a, b) <= 1.0

    def test_too_small(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((10, 10)), np.zeros((10, 10)))


def test_report_fields(rng):
    a = rng.uniform(size=(16, 16, 3))
    rep = report(a, a)
    assert rep == {"l1": 0.0, "psnr": PSNR_CAP_DB, "ssim": pytest.approx(1.0, abs=1e-9)}
    assert report(a[:5, :5], a[:5, :5])["ssim"] is None
