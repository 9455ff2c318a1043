"""8-bit PNG image IO and small grid assembly helpers."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, image: np.ndarray, alpha: np.ndarray | None = None) -> None:
    """Write a [0,1] float image (HxW grayscale or HxWx3) as 8-bit PNG."""
    arr = to_uint8(image)
    if arr.ndim == 2:
        img = Image.fromarray(arr, mode="L")
    elif alpha is not None:
        rgba = np.concatenate([arr, to_uint8(alpha)[..., None]], axis=-1)
        img = Image.fromarray(rgba, mode="RGBA")
    else:
        img = Image.fromarray(arr, mode="RGB")
    img.save(Path(path))


def load_png(path) -> np.ndarray:
    """Read a PNG back to float in [0,1]; RGBA collapses to RGB."""
    arr = np.asarray(Image.open(Path(path)))
    out = arr.astype(np.float64) / 255.0
    if out.ndim == 3 and out.shape[2] == 4:
        out = out[..., :3]
    return out


def image_grid(images: list[np.ndarray], pad: int = 2) -> np.ndarray:
    """Tile same-sized images horizontally with white padding."""
    h, w = images[0].shape[:2]
    cells = []
    for im in images:
        if im.ndim == 2:
            im = np.repeat(im[..., None], 3, axis=-1)
        cells.append(im)
        cells.append(np.ones((h, pad, 3)))
    return np.concatenate(cells[:-1], axis=1)
