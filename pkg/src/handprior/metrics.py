"""Image-quality metrics for evaluation reports: PSNR, perceptual, SSIM proxy."""

from __future__ import annotations

import numpy as np
import torch
from scipy.ndimage import uniform_filter

from .losses import perceptual_distance

PSNR_CAP = 99.0


def psnr(image_a: np.ndarray, image_b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(image_a) - np.asarray(image_b)) ** 2))
    if mse < 10 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def ssim_proxy(image_a: np.ndarray, image_b: np.ndarray, window: int = 7) -> float:
    """Mean local structural similarity on luma with uniform windows."""
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.ndim == 3:
        a = a @ np.array([0.299, 0.587, 0.114])
        b = b @ np.array([0.299, 0.587, 0.114])
    c1, c2 = 0.01**2, 0.03**2
    mu_a = uniform_filter(a, window)
    mu_b = uniform_filter(b, window)
    var_a = uniform_filter(a * a, window) - mu_a**2
    var_b = uniform_filter(b * b, window) - mu_b**2
    cov = uniform_filter(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def image_metrics(rendered: np.ndarray, target: np.ndarray) -> dict[str, float]:
    perc = float(
        perceptual_distance(
            torch.as_tensor(rendered, dtype=torch.float64),
            torch.as_tensor(target, dtype=torch.float64),
        )
    )
    return {
        "psnr": psnr(rendered, target),
        "perceptual": perc,
        "ssim": ssim_proxy(rendered, target),
    }
