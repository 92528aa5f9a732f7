"""Image quality metrics on images with data range [0, 1]."""

from __future__ import annotations

import numpy as np

PSNR_CAP = 200.0


def psnr(x, ref, peak: float = 1.0) -> float:
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak**2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    g /= g.sum()
    return g


def _filter_valid(img, g):
    """Separable 'valid' correlation with the 1-D window ``g``."""
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(x, ref, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM, Gaussian window, averaged over valid window positions."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    if x.ndim != 2 or min(x.shape) < win_size:
        raise ValueError(f"image {x.shape} smaller than the {win_size}x{win_size} window")
    g = gaussian_window(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mx = _filter_valid(x, g)
    my = _filter_valid(ref, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(ref * ref, g) - my * my
    sxy = _filter_valid(x * ref, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))
