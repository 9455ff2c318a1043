"""Objective terms for both training stages.

The perceptual distance is a deterministic multi-scale feature distance over
a fixed random convolution bank with unit-normalized channels, plus a raw
pixel term so it vanishes only on identical images. The interface is a plain
function of two images, so a heavier learned backend can be swapped in.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
import torch
from torch import nn

from .utils import rng_from_seed

_PERCEPTUAL_BANK_SEED = 714025


@dataclass
class LossWeights:
    lambda_shadow: float = 0.1
    lambda_ref: float = 0.2

    def validate(self) -> None:
        if not (self.lambda_shadow >= 0 and np.isfinite(self.lambda_shadow)):
            raise ValueError("lambda_shadow must be finite and nonnegative")
        if not (self.lambda_ref >= 0 and np.isfinite(self.lambda_ref)):
            raise ValueError("lambda_ref must be finite and nonnegative")


def loss_occ(predicted: torch.Tensor, ground_truth: torch.Tensor) -> torch.Tensor:
    """Mean squared occupancy error."""
    if predicted.shape != ground_truth.shape:
        raise ValueError("occupancy prediction/label length mismatch")
    diff = predicted - ground_truth.to(predicted.dtype)
    return (diff * diff).mean()


@lru_cache(maxsize=4)
def _conv_bank(dtype_str: str, channels: int = 12) -> list[torch.Tensor]:
    """Fixed random 3x3 kernels for three pyramid scales (seeded, constant)."""
    rng = rng_from_seed(_PERCEPTUAL_BANK_SEED, "perceptual")
    dtype = getattr(torch, dtype_str)
    banks = []
    for _ in range(3):
        k = rng.normal(size=(channels, 3, 3, 3)) / np.sqrt(27.0)
        banks.append(torch.as_tensor(k, dtype=dtype))
    return banks


def _as_nchw(image: torch.Tensor) -> torch.Tensor:
    if image.ndim == 2:
        image = image[..., None].expand(-1, -1, 3)
    return image.permute(2, 0, 1).unsqueeze(0)


def perceptual_distance(image_a: torch.Tensor, image_b: torch.Tensor) -> torch.Tensor:
    """Deterministic LPIPS-style distance; zero iff the images are identical."""
    if image_a.shape != image_b.shape:
        raise ValueError("image shape mismatch")
    a = _as_nchw(image_a)
    b = _as_nchw(image_b)
    banks = _conv_bank(str(a.dtype).split(".")[-1])
    total = ((image_a - image_b) ** 2).mean()
    for level, kernel in enumerate(banks):
        if level > 0:
            if min(a.shape[-2:]) < 2:
                break
            a = torch.nn.functional.avg_pool2d(a, 2)
            b = torch.nn.functional.avg_pool2d(b, 2)
        if min(a.shape[-2:]) < 3:
            break
        fa = torch.tanh(torch.nn.functional.conv2d(a, kernel))
        fb = torch.tanh(torch.nn.functional.conv2d(b, kernel))
        na = fa / torch.sqrt((fa * fa).sum(dim=1, keepdim=True) + 1e-10)
        nb = fb / torch.sqrt((fb * fb).sum(dim=1, keepdim=True) + 1e-10)
        total = total + ((na - nb) ** 2).sum(dim=1).mean()
    return total


def _crop_to_mask(
    rendered: torch.Tensor, target: torch.Tensor, mask: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Restrict both images to the mask bounding box and zero outside the mask."""
    m = mask.to(torch.bool)
    if not m.any():
        raise ValueError("empty mask")
    ys, xs = torch.nonzero(m, as_tuple=True)
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    mc = m[y0:y1, x0:x1]
    sel = mc[..., None].to(rendered.dtype)
    return rendered[y0:y1, x0:x1] * sel, target[y0:y1, x0:x1] * sel, mc


def loss_rec(
    rendered: torch.Tensor,
    target: torch.Tensor,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Perceptual plus mean-absolute reconstruction error.

    With a mask, both terms see the mask's bounding-box crop with outside
    pixels zeroed in both images; the l1 mean runs over mask pixels only.
    """
    if rendered.shape != target.shape:
        raise ValueError("image shape mismatch")
    if mask is None:
        l1 = (rendered - target).abs().mean()
        return perceptual_distance(rendered, target) + l1
    r, t, mc = _crop_to_mask(rendered, target, mask)
    l1 = (r - t).abs().sum() / (mc.sum() * rendered.shape[-1])
    return perceptual_distance(r, t) + l1


def loss_shadow(shadow_values: torch.Tensor) -> torch.Tensor:
    """Mean absolute deviation of shadow from 1 (self-occlusion only darkens)."""
    if shadow_values.numel() == 0:
        return torch.zeros((), dtype=shadow_values.dtype)
    return (shadow_values - 1.0).abs().mean()


def loss_shape(predicted_alpha: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Soft-IoU silhouette loss: 1 - sum(min) / sum(max)."""
    if predicted_alpha.shape != mask.shape:
        raise ValueError("alpha/mask shape mismatch")
    m = mask.to(predicted_alpha.dtype)
    inter = torch.minimum(predicted_alpha, m).sum()
    union = torch.maximum(predicted_alpha, m).sum()
    if union == 0:
        return torch.zeros((), dtype=predicted_alpha.dtype)
    return 1.0 - inter / union


def total_prior_loss(
    l_shape: torch.Tensor,
    l_occ: torch.Tensor,
    l_rec: torch.Tensor,
    l_shadow: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    return l_shape + l_occ + l_rec + weights.lambda_shadow * l_shadow


def total_fit_loss(
    rendered: torch.Tensor,
    target: torch.Tensor,
    ref_renders: list[torch.Tensor],
    ref_targets: list[torch.Tensor],
    lambda_ref: float,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Input-view reconstruction plus weighted reference-view regularization."""
    if len(ref_renders) != len(ref_targets):
        raise ValueError("reference render/target count mismatch")
    total = loss_rec(rendered, target, mask)
    for r, t in zip(ref_renders, ref_targets):
        total = total + lambda_ref * loss_rec(r, t)
    return total
