"""Image quality metrics: PSNR, SSIM and RMSE on [0, 1] grayscale arrays.

SSIM uses the standard 11x11 Gaussian window (sigma 1.5) with K1=0.01,
K2=0.03 and a valid-region mean, so reported numbers are comparable with the
common reference implementation. Identical images report PSNR as +inf.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"metric: shapes {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check(a, b)
    if max_val <= 0:
        raise ConfigError(f"max_val must be positive, got {max_val}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(max_val * max_val / mse)


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def _filter_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = win.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(x, (k, k))
    return np.einsum("hwij,ij->hw", view, win, optimize=True)


def ssim(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ConfigError(
            f"ssim needs images of side >= {SSIM_WINDOW}, got {a.shape}"
        )
    win = _gaussian_window()
    c1 = (SSIM_K1 * max_val) ** 2
    c2 = (SSIM_K2 * max_val) ** 2
    mu1 = _filter_valid(a, win)
    mu2 = _filter_valid(b, win)
    s11 = _filter_valid(a * a, win) - mu1 * mu1
    s22 = _filter_valid(b * b, win) - mu2 * mu2
    s12 = _filter_valid(a * b, win) - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    per_image: list[tuple[str, float, float, float]] = field(default_factory=list)

    def add(self, image_id: str, restored: np.ndarray, reference: np.ndarray) -> None:
        self.per_image.append(
            (image_id, psnr(restored, reference), ssim(restored, reference), rmse(restored, reference))
        )

    def aggregate(self) -> dict[str, tuple[float, float]]:
        """Mean and std per metric over the evaluated images."""
        if not self.per_image:
            return {m: (float("nan"), float("nan")) for m in ("psnr", "ssim", "rmse")}
        cols = np.array([[p, s, r] for _, p, s, r in self.per_image], dtype=np.float64)
        return {
            name: (float(np.mean(cols[:, i])), float(np.std(cols[:, i])))
            for i, name in enumerate(("psnr", "ssim", "rmse"))
        }

    def csv_rows(self) -> list[str]:
        rows = ["id,psnr,ssim,rmse"]
        for image_id, p, s, r in self.per_image:
            rows.append(f"{image_id},{p:.6f},{s:.6f},{r:.6f}")
        agg = self.aggregate()
        rows.append(
            "aggregate,{:.6f}±{:.6f},{:.6f}±{:.6f},{:.6f}±{:.6f}".format(
                *agg["psnr"], *agg["ssim"], *agg["rmse"]
            )
        )
        return rows
