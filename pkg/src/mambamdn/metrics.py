"""PSNR, SSIM and RMSE on magnitude images, and per-sample aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError

__all__ = ["psnr", "ssim", "rmse", "gaussian_window", "MetricReport"]


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"metric inputs differ in shape: {pred.shape} vs {gt.shape}")
    return pred, gt


def _range(gt: np.ndarray, data_range: float | None) -> float:
    r = float(gt.max()) if data_range is None else float(data_range)
    if r <= 0:
        raise ValueError(f"data_range must be positive, got {r}")
    return r


def psnr(pred, gt, data_range: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the images are identical."""
    pred, gt = _pair(pred, gt)
    r = _range(gt, data_range)
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(r * r / mse)


def rmse(pred, gt, normalize: bool = False, data_range: float | None = None) -> float:
    """Root mean square error; with ``normalize`` it is a percentage of the data range."""
    pred, gt = _pair(pred, gt)
    value = math.sqrt(float(np.mean((pred - gt) ** 2)))
    if normalize:
        value = 100.0 * value / _range(gt, data_range)
    return value


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation over complete windows only
    k = g.size
    h, w = img.shape
    rows = sum(g[i] * img[i : h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[:, j : w - k + 1 + j] for j in range(k))


def ssim(
    pred,
    gt,
    data_range: float | None = None,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean structural similarity over all complete Gaussian windows."""
    pred, gt = _pair(pred, gt)
    if pred.ndim != 2 or min(pred.shape) < window:
        raise ShapeError(f"ssim needs 2-D images of at least {window}x{window}, got {pred.shape}")
    r = _range(gt, data_range)
    c1, c2 = (k1 * r) ** 2, (k2 * r) ** 2
    g = gaussian_window(window, sigma)
    mx, my = _filter_valid(pred, g), _filter_valid(gt, g)
    sxx = _filter_valid(pred * pred, g) - mx * mx
    syy = _filter_valid(gt * gt, g) - my * my
    sxy = _filter_valid(pred * gt, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    """Per-sample metrics plus their summary statistics."""

    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    rmse: list[float] = field(default_factory=list)
    nrmse: list[float] = field(default_factory=list)

    def add(self, pred_mag, gt_mag, data_range: float | None = None) -> None:
        self.psnr.append(psnr(pred_mag, gt_mag, data_range))
        self.ssim.append(ssim(pred_mag, gt_mag, data_range))
        self.rmse.append(rmse(pred_mag, gt_mag))
        self.nrmse.append(rmse(pred_mag, gt_mag, normalize=True, data_range=data_range))

    @property
    def n(self) -> int:
        return len(self.psnr)

    @staticmethod
    def _mean(values: list[float]) -> float:
        return float(np.mean(values)) if values else math.nan

    @property
    def psnr_db(self) -> float:
        return self._mean(self.psnr)

    @property
    def mean_ssim(self) -> float:
        return self._mean(self.ssim)

    @property
    def mean_rmse(self) -> float:
        return self._mean(self.rmse)

    @property
    def mean_nrmse(self) -> float:
        return self._mean(self.nrmse)

    @property
    def psnr_std(self) -> float:
        """Population std over the finite PSNR values (exact matches give ``inf``)."""
        finite = [p for p in self.psnr if math.isfinite(p)]
        return float(np.std(finite)) if finite else math.nan

    def extend(self, other: MetricReport) -> None:
        self.psnr += other.psnr
        self.ssim += other.ssim
        self.rmse += other.rmse
        self.nrmse += other.nrmse
