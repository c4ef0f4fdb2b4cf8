"""Photometric quality metrics on [0, 1] images."""
from __future__ import annotations

import numpy as np

from .losses import ssim_value

PSNR_LOG_CAP = 100.0  # reported cap for identical images


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) in dB; +inf for identical images (cap when logging)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """SSIM via the shared D-SSIM kernel: 1 - 2*dssim(a, b) exactly."""
    return ssim_value(a, b)
