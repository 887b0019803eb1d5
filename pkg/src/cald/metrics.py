"""Distortion metrics shared by the codec pipeline and evaluation."""

from __future__ import annotations

import math

import numpy as np

PSNR_CAP = 100.0
PEAK = 255.0


def mse255(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Mean squared error on 255-scaled pixels; inputs are in [0, 1]."""
    x = np.asarray(x, np.float64)
    x_hat = np.asarray(x_hat, np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"psnr: shape mismatch {x.shape} vs {x_hat.shape}")
    d = (x - x_hat) * PEAK
    return float(np.mean(d * d))


def psnr_from_mse255(mse: float) -> float:
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(PEAK * PEAK / mse))


def psnr(x: np.ndarray, x_hat: np.ndarray) -> float:
    """PSNR in dB of images given in [0, 1]; identical images report the 100 dB cap."""
    return psnr_from_mse255(mse255(x, x_hat))
