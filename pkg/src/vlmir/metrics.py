"""Distortion metrics on HWC float images in [0, 1]."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
# full-range BT.601 luma
Y_WEIGHTS = np.array([0.299, 0.587, 0.114])


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for unit peak; ``inf`` when the images are equal."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0 else 10 * math.log10(1.0 / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _filter(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable valid-mode filtering over the first two axes."""
    half = w.size // 2
    out = correlate1d(correlate1d(img, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    return out[half : img.shape[0] - half, half : img.shape[1] - half]


def ssim_map(a, b) -> np.ndarray:
    a, b = _pair(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    w = _gaussian_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mu_a, mu_b = _filter(a, w), _filter(b, w)
    var_a = _filter(a * a, w) - mu_a**2
    var_b = _filter(b * b, w) - mu_b**2
    cov = _filter(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels."""
    return float(ssim_map(a, b).mean())


def rgb_to_y(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape[-1] != 3:
        raise ValueError(f"expected RGB in the last axis, got shape {img.shape}")
    return img @ Y_WEIGHTS


def y_psnr(a, b) -> float:
    return psnr(rgb_to_y(a), rgb_to_y(b))


def y_ssim(a, b) -> float:
    return ssim(rgb_to_y(a), rgb_to_y(b))


BUILTIN_METRICS = {"psnr": psnr, "ssim": ssim, "y_psnr": y_psnr, "y_ssim": y_ssim}
