"""Pearson correlation and mean SSIM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateInput, DimensionMismatch, ImageTooSmall


def pearson_r(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise DimensionMismatch(f"lengths differ: {pred.size} vs {truth.size}")
    if pred.size < 2:
        raise DegenerateInput("need at least two samples")
    dp = pred - pred.mean()
    dt = truth - truth.mean()
    sp = np.sqrt(np.dot(dp, dp))
    st = np.sqrt(np.dot(dt, dt))
    if st == 0 or sp == 0:
        raise DegenerateInput("correlation undefined for a constant input")
    return float(np.clip(np.dot(dp, dt) / (sp * st), -1.0, 1.0))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalised 1-D Gaussian taps; the 2-D window is their outer product."""
    if size % 2 == 0 or size < 1:
        raise ValueError("window size must be odd and positive")
    t = np.arange(size) - (size - 1) / 2
    w = np.exp(-(t ** 2) / (2 * sigma ** 2))
    return w / w.sum()


@dataclass
class SsimConfig:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float | None = None  # defaults to truth.max() - truth.min()

    def __post_init__(self):
        if self.window_size % 2 == 0:
            raise ValueError("window size must be odd")


def _filter_valid(img, taps):
    """Separable correlation, keeping only fully covered positions."""
    rows = sliding_window_view(img, taps.size, axis=0) @ taps
    return sliding_window_view(rows, taps.size, axis=1) @ taps


def ssim_map(pred, truth, cfg: SsimConfig | None = None) -> np.ndarray:
    cfg = cfg or SsimConfig()
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if x.ndim == 3 and x.shape[2] == 1:
        x = x[:, :, 0]
    if y.ndim == 3 and y.shape[2] == 1:
        y = y[:, :, 0]
    if x.shape != y.shape or x.ndim != 2:
        raise DimensionMismatch(f"need two single-channel images of equal size, got {x.shape} and {y.shape}")
    if min(x.shape) < cfg.window_size:
        raise ImageTooSmall(f"image {x.shape} is smaller than the {cfg.window_size}px window")
    rng = cfg.dynamic_range
    if rng is None:
        rng = float(y.max() - y.min())
    if not rng > 0:
        raise DegenerateInput("dynamic range must be positive; pass it explicitly for constant truth")
    c1 = (cfg.k1 * rng) ** 2
    c2 = (cfg.k2 * rng) ** 2
    taps = gaussian_window(cfg.window_size, cfg.sigma)
    mx = _filter_valid(x, taps)
    my = _filter_valid(y, taps)
    sxx = _filter_valid(x * x, taps) - mx * mx
    syy = _filter_valid(y * y, taps) - my * my
    sxy = _filter_valid(x * y, taps) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(pred, truth, cfg: SsimConfig | None = None) -> float:
    """Mean SSIM over all fully covered Gaussian windows (no border padding)."""
    return float(np.mean(ssim_map(pred, truth, cfg)))
