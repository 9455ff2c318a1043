"""Pinhole camera, ray sampling, and occupancy-weighted compositing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import geometry
from .fields import PriorModel
from .mesh import PosedMesh, PoseParams
from .utils import rng_from_seed


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: np.ndarray  # 4x4 world -> camera

    def __post_init__(self):
        self.extrinsic = np.asarray(self.extrinsic, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def position(self) -> np.ndarray:
        r = self.extrinsic[:3, :3]
        return -r.T @ self.extrinsic[:3, 3]

    def pixel_grid(self) -> np.ndarray:
        ys, xs = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([xs.ravel(), ys.ravel()], axis=1)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "extrinsic": self.extrinsic.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
            width=d["width"], height=d["height"],
            extrinsic=np.asarray(d["extrinsic"]),
        )


def save_camera(path, camera: Camera) -> None:
    Path(path).write_text(json.dumps({"format": "handprior-camera", "version": 1, **camera.to_dict()}))


def load_camera(path) -> Camera:
    d = json.loads(Path(path).read_text())
    if d.get("format") != "handprior-camera":
        raise ValueError(f"{path} is not a camera file")
    return Camera.from_dict(d)


def look_at_camera(
    position: np.ndarray,
    target: np.ndarray,
    width: int,
    height: int,
    focal: float,
    up: np.ndarray = (0.0, 0.0, 1.0),
) -> Camera:
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])
    ext = np.eye(4)
    ext[:3, :3] = r
    ext[:3, 3] = -r @ position
    return Camera(fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0, width=width, height=height, extrinsic=ext)


@dataclass
class RayBatch:
    origins: torch.Tensor  # (R, 3)
    directions: torch.Tensor  # (R, 3) unit
    depths: torch.Tensor  # (R, Q) strictly increasing
    pixels: np.ndarray  # (R, 2) integer (x, y)

    def points(self) -> torch.Tensor:
        return self.origins[:, None, :] + self.directions[:, None, :] * self.depths[:, :, None]


def generate_rays(camera: Camera, pixels: np.ndarray, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    """Back-project pixel coordinates; origins at the camera center."""
    pixels = np.asarray(pixels)
    if (
        (pixels[:, 0] < 0).any()
        or (pixels[:, 0] >= camera.width).any()
        or (pixels[:, 1] < 0).any()
        or (pixels[:, 1] >= camera.height).any()
    ):
        raise ValueError("pixel indices out of image bounds")
    x = (pixels[:, 0] - camera.cx) / camera.fx
    y = (pixels[:, 1] - camera.cy) / camera.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=1)
    r = camera.extrinsic[:3, :3]
    d_world = d_cam @ r  # R^T d
    d_world = d_world / np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.position, d_world.shape)
    return (
        torch.as_tensor(origins.copy(), dtype=dtype),
        torch.as_tensor(d_world, dtype=dtype),
    )


def sample_along_ray(
    near: torch.Tensor,
    far: torch.Tensor,
    count: int,
    jitter: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> torch.Tensor:
    """Uniformly spaced depths per ray, optionally jittered within each bin."""
    if (near >= far).any():
        raise ValueError("need near < far")
    t = torch.linspace(0.0, 1.0, count, dtype=near.dtype)
    depths = near[:, None] * (1.0 - t) + far[:, None] * t
    if jitter and count > 1:
        if rng is None:
            raise ValueError("jittered sampling needs an explicit rng")
        mids = 0.5 * (depths[:, 1:] + depths[:, :-1])
        lower = torch.cat([depths[:, :1], mids], dim=1)
        upper = torch.cat([mids, depths[:, -1:]], dim=1)
        u = torch.as_tensor(rng.random(depths.shape), dtype=depths.dtype)
        depths = lower + (upper - lower) * u
    return depths


def composite(
    occupancies: torch.Tensor,
    colors: torch.Tensor,
    background: Optional[torch.Tensor] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Front-to-back compositing of per-sample colors by occupancy.

    occupancies: (..., Q); colors: (..., Q, 3). The pixel weight of sample i
    is its occupancy times the transmittance through all earlier samples, and
    the leftover transmittance goes to the background.
    """
    trans = torch.cumprod(1.0 - occupancies, dim=-1)
    trans = torch.cat([torch.ones_like(trans[..., :1]), trans[..., :-1]], dim=-1)
    weights = trans * occupancies  # (..., Q)
    color = (weights[..., None] * colors).sum(dim=-2)
    alpha = weights.sum(dim=-1)
    if background is not None:
        color = color + (1.0 - alpha)[..., None] * background
    return color, alpha


def composite_reference(occupancies, colors, background=None):
    """Scalar per-ray reference for the batched compositor (oracle path)."""
    occ = np.asarray(occupancies, dtype=np.float64)
    col = np.asarray(colors, dtype=np.float64)
    out = np.zeros(3)
    alpha = 0.0
    trans = 1.0
    for i in range(len(occ)):
        w = trans * occ[i]
        out = out + w * col[i]
        alpha += w
        trans *= 1.0 - occ[i]
    if background is not None:
        out = out + (1.0 - alpha) * np.asarray(background, dtype=np.float64)
    return out, alpha


@dataclass
class RenderOptions:
    num_samples: int = 64
    jitter: bool = False
    seed: int = 0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    prune: bool = True
    chunk_rays: int = 2048
    near: Optional[float] = None
    far: Optional[float] = None
    knn_method: str = "auto"
    shadow_override: Optional[float] = None


def mesh_bounds(posed: PosedMesh, dilation: float = 0.1) -> tuple[np.ndarray, float]:
    verts = posed.vertices.detach().cpu().numpy()
    center = 0.5 * (verts.min(axis=0) + verts.max(axis=0))
    radius = float(np.linalg.norm(verts - center, axis=1).max()) * (1.0 + dilation)
    return center, radius


def ray_sphere_span(
    origins: torch.Tensor, directions: torch.Tensor, center: np.ndarray, radius: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-ray [near, far] from the dilated bounding sphere, clipped positive.

    Rays that miss the sphere get a span at their closest approach; their
    samples land outside the occupancy gate and composite to background.
    """
    c = torch.as_tensor(center, dtype=origins.dtype)
    oc = c - origins
    mid = (oc * directions).sum(dim=1)
    par2 = (oc * oc).sum(dim=1) - mid * mid
    disc = (radius * radius - par2).clamp_min(0.0)
    half = torch.sqrt(disc)
    near = (mid - half).clamp_min(1e-4 * radius)
    far = mid + half
    bad = far <= near
    near = torch.where(bad, mid.clamp_min(1e-4 * radius), near)
    far = torch.where(bad, near + 1e-3 * radius, far)
    return near, far


def render_pixels(
    model: PriorModel,
    posed: PosedMesh,
    pose: PoseParams,
    code: torch.Tensor,
    camera: Camera,
    pixels: np.ndarray,
    options: RenderOptions = RenderOptions(),
    calibration: Optional[tuple[torch.Tensor, torch.Tensor]] = None,
    albedo_field=None,
    return_samples: bool = False,
):
    """Composite the fields along rays through the given pixels.

    Returns (colors (R, 3), alpha (R,)) and, when `return_samples` is set,
    the evaluated shadow values (for regularization terms).
    """
    dtype = model.identity_codes.dtype
    albedo_field = albedo_field if albedo_field is not None else model.albedo_field
    origins, dirs = generate_rays(camera, pixels, dtype=dtype)
    center, radius = mesh_bounds(posed)
    near_t, far_t = ray_sphere_span(origins, dirs, center, radius)
    if options.near is not None:
        near_t = torch.full_like(near_t, options.near)
    if options.far is not None:
        far_t = torch.full_like(far_t, options.far)
    rng = rng_from_seed(options.seed, "ray_jitter") if options.jitter else None
    depths = sample_along_ray(near_t, far_t, options.num_samples, jitter=options.jitter, rng=rng)
    finger = pose.finger_pose.to(dtype)

    n_rays = len(pixels)
    q = options.num_samples
    colors = []
    alphas = []
    shadows = []
    bg = torch.as_tensor(options.background, dtype=dtype)
    for s in range(0, n_rays, options.chunk_rays):
        sl = slice(s, min(s + options.chunk_rays, n_rays))
        pts = (
            origins[sl][:, None, :] + dirs[sl][:, None, :] * depths[sl][:, :, None]
        ).reshape(-1, 3)
        if options.prune:
            keep = ~model.occupancy_field.prune_mask(pts, posed)
        else:
            keep = torch.ones(pts.shape[0], dtype=torch.bool)
        occ = pts.new_zeros(pts.shape[0])
        shaded = pts.new_zeros(pts.shape[0], 3)
        if keep.any():
            kept = pts[keep]
            occ_k = model.occupancy_field(kept, posed, finger)
            alb_k = albedo_field(kept, posed, code, method=options.knn_method)
            if options.shadow_override is not None:
                shd_k = kept.new_full((kept.shape[0], 1), float(options.shadow_override))
            else:
                shd_k = model.shadow_field(kept, posed, finger, method=options.knn_method)
            if calibration is not None:
                w, b = calibration
                alb_k = w.to(dtype) * alb_k + b.to(dtype)
            occ = occ.masked_scatter(keep, occ_k)
            shaded = shaded.masked_scatter(keep[:, None].expand(-1, 3), shd_k * alb_k)
            shadows.append(shd_k.reshape(-1))
        nr = sl.stop - sl.start
        col, alpha = composite(occ.reshape(nr, q), shaded.reshape(nr, q, 3), background=bg)
        colors.append(col)
        alphas.append(alpha)
    color = torch.cat(colors)
    alpha = torch.cat(alphas)
    if return_samples:
        shadow_vals = torch.cat(shadows) if shadows else color.new_zeros(0)
        return color, alpha, shadow_vals
    return color, alpha


def render_image(
    model: PriorModel,
    posed: PosedMesh,
    pose: PoseParams,
    code: torch.Tensor,
    camera: Camera,
    options: RenderOptions = RenderOptions(),
    calibration=None,
    albedo_field=None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Full-frame render: (H, W, 3) shaded image and (H, W) alpha map."""
    pixels = camera.pixel_grid()
    color, alpha = render_pixels(
        model, posed, pose, code, camera, pixels, options, calibration, albedo_field
    )
    h, w = camera.height, camera.width
    return color.reshape(h, w, 3), alpha.reshape(h, w)


def render_silhouette(
    model_or_mesh,
    pose: Optional[PoseParams],
    camera: Camera,
    code: Optional[torch.Tensor] = None,
    options: RenderOptions = RenderOptions(),
):
    """Alpha map of a model render, or a rasterized mask for an explicit mesh."""
    if isinstance(model_or_mesh, PosedMesh):
        mesh = model_or_mesh
        mask = geometry.rasterize_silhouette(
            mesh.vertices.detach().cpu().numpy(),
            mesh.faces,
            (camera.fx, camera.fy, camera.cx, camera.cy),
            camera.extrinsic,
            camera.width,
            camera.height,
        )
        return torch.as_tensor(mask, dtype=torch.float64)
    model, posed = model_or_mesh
    _, alpha = render_image(model, posed, pose, code, camera, options)
    return alpha
