"""Shared numeric helpers: seeded RNG streams, rotation math, smooth windows."""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def rng_from_seed(seed: int, *scope) -> np.random.Generator:
    """Deterministic generator for a (seed, scope...) stream.

    Scope items (strings/ints) isolate substreams so that e.g. step 7 of a
    training run draws the same numbers regardless of what other components
    consumed from the root seed.
    """
    h = hashlib.sha256(repr((int(seed),) + tuple(scope)).encode()).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(h[:8], "little")))


def torch_gen_from_seed(seed: int, *scope) -> torch.Generator:
    h = hashlib.sha256(repr((int(seed),) + tuple(scope)).encode()).digest()
    g = torch.Generator()
    g.manual_seed(int.from_bytes(h[:8], "little") & 0x7FFFFFFFFFFFFFFF)
    return g


def axis_angle_to_matrix(vec: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula for (..., 3) axis-angle vectors -> (..., 3, 3).

    Series expansion near zero angle keeps the map exact at vec = 0 and
    smooth everywhere (needed for finite-difference gradient checks).
    """
    theta2 = (vec * vec).sum(-1)
    theta = torch.sqrt(theta2 + 1e-300)
    small = theta < 1e-4
    # sin(t)/t and (1-cos(t))/t^2, with Taylor fallbacks
    sinc = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    cosc = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / theta2.clamp_min(1e-300))
    x, y, z = vec[..., 0], vec[..., 1], vec[..., 2]
    zero = torch.zeros_like(x)
    k = torch.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], dim=-1
    ).reshape(vec.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=vec.dtype, device=vec.device).expand(k.shape)
    return eye + sinc[..., None, None] * k + cosc[..., None, None] * (k @ k)


def smoothstep(x: torch.Tensor) -> torch.Tensor:
    """C1 ramp: 0 for x <= 0, 1 for x >= 1, 3x^2 - 2x^3 between."""
    t = x.clamp(0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def soft_window(dist: torch.Tensor, inner: float, outer: float) -> torch.Tensor:
    """1 inside `inner`, exactly 0 beyond `outer`, smooth in between."""
    return smoothstep((outer - dist) / (outer - inner))


def to_tensor(x, dtype=torch.float64) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
