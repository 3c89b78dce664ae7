"""PSNR / SSIM / RMSE semantics and the independent SSIM oracle."""

import numpy as np
import pytest

from rwkvir.errors import ConfigError, ShapeError
from rwkvir.metrics import (
    SSIM_K1,
    SSIM_K2,
    SSIM_SIGMA,
    SSIM_WINDOW,
    MetricReport,
    _gaussian_window,
    psnr,
    rmse,
    ssim,
)


def rng(seed=0):
    return np.random.default_rng(seed)


class TestPsnr:
    def test_closed_form_20db(self):
        a = np.zeros((4, 4))
        b = np.full((4, 4), 0.1)  # MSE = 0.01
        assert abs(psnr(a, b, 1.0) - 20.0) < 1e-12

    def test_identical_is_inf(self):
        a = rng().random((5, 5))
        assert psnr(a, a) == float("inf")

    def test_single_pixel_hand_mse(self):
        a = np.zeros((4, 4))
        b = a.copy()
        b[1, 2] = 0.4  # MSE = 0.16 / 16 = 0.01 -> 20 dB
        assert abs(psnr(a, b) - 20.0) < 1e-12

    def test_symmetric(self):
        r = rng(1)
        a, b = r.random((6, 6)), r.random((6, 6))
        assert psnr(a, b) == psnr(b, a)

    def test_monotone_in_noise_sigma(self):
        r = rng(2)
        img = r.random((32, 32))
        vals = []
        for sigma in (0.01, 0.05, 0.1):
            noisy = img + r.normal(0, sigma, img.shape)
            vals.append(psnr(img, noisy))
        assert vals[0] > vals[1] > vals[2]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((2, 2)), np.zeros((3, 2)))

    def test_bad_max_val(self):
        with pytest.raises(ConfigError):
            psnr(np.zeros((2, 2)), np.zeros((2, 2)), max_val=0.0)


class TestRmse:
    def test_identical_zero(self):
        a = rng().random((5, 5))
        assert rmse(a, a) == 0.0

    def test_constant_offset(self):
        a = rng().random((5, 5))
        assert abs(rmse(a, a + 0.25) - 0.25) < 1e-12

    def test_matches_direct_loop(self):
        r = rng(3)
        a, b = r.random((7, 5)), r.random((7, 5))
        acc = 0.0
        for i in range(7):
            for j in range(5):
                acc += (a[i, j] - b[i, j]) ** 2
        assert abs(rmse(a, b) - np.sqrt(acc / 35)) <= 1e-12


def ssim_direct(a, b, max_val=1.0):
    """Independent direct-summation SSIM: explicit loops over windows."""
    win = _gaussian_window()
    k = SSIM_WINDOW
    c1 = (SSIM_K1 * max_val) ** 2
    c2 = (SSIM_K2 * max_val) ** 2
    H, W = a.shape
    vals = []
    for i in range(H - k + 1):
        for j in range(W - k + 1):
            pa = a[i : i + k, j : j + k]
            pb = b[i : i + k, j : j + k]
            mu1 = (win * pa).sum()
            mu2 = (win * pb).sum()
            s11 = (win * pa * pa).sum() - mu1 * mu1
            s22 = (win * pb * pb).sum() - mu2 * mu2
            s12 = (win * pa * pb).sum() - mu1 * mu2
            vals.append(
                ((2 * mu1 * mu2 + c1) * (2 * s12 + c2))
                / ((mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2))
            )
    return float(np.mean(vals))


class TestSsim:
    def test_identical_is_exactly_one(self):
        a = rng(4).random((16, 16))
        assert ssim(a, a) == 1.0

    def test_anticorrelated_is_negative(self):
        a = np.zeros((16, 16))
        a[:, ::2] = 1.0  # high-contrast stripes
        assert ssim(a, 1.0 - a) < 0.0

    def test_matches_direct_summation_oracle(self):
        r = rng(5)
        a, b = r.random((16, 16)), r.random((16, 16))
        assert abs(ssim(a, b) - ssim_direct(a, b)) <= 1e-9

    def test_window_properties(self):
        win = _gaussian_window()
        assert win.shape == (SSIM_WINDOW, SSIM_WINDOW)
        assert abs(win.sum() - 1.0) < 1e-12
        assert SSIM_SIGMA == 1.5

    def test_too_small_rejected(self):
        with pytest.raises(ConfigError):
            ssim(np.zeros((10, 16)), np.zeros((10, 16)))

    def test_symmetric_and_in_range(self):
        r = rng(6)
        a, b = r.random((14, 14)), r.random((14, 14))
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-15
        assert -1.0 <= ssim(a, b) <= 1.0


class TestReport:
    def test_aggregate_and_csv(self):
        r = rng(7)
        hq = r.random((16, 16))
        rep = MetricReport()
        rep.add("one", np.clip(hq + 0.01, 0, 1), hq)
        rep.add("two", np.clip(hq + 0.02, 0, 1), hq)
        agg = rep.aggregate()
        assert agg["psnr"][0] > 30.0 and agg["rmse"][0] < 0.03
        rows = rep.csv_rows()
        assert rows[0] == "id,psnr,ssim,rmse"
        assert len(rows) == 4 and rows[-1].startswith("aggregate,")
