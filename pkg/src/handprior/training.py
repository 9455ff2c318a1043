"""Stage-1 pipeline: occupancy pretraining and end-to-end prior learning."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .checkpoint import save_model
from .fields import PriorModel, occupancy_ground_truth
from .images import load_png
from .losses import LossWeights, loss_occ, loss_rec, loss_shadow, loss_shape, total_prior_loss
from .mesh import PoseParams, PosedMesh, ShapeParams, TemplateMesh, lbs_pose, load_template, refine_template
from .metrics import image_metrics
from .render import Camera, RenderOptions, render_pixels
from .utils import rng_from_seed


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Frame:
    image: np.ndarray
    mask: np.ndarray
    pose: PoseParams
    shape: ShapeParams
    camera: Camera
    split: str = "train"


@dataclass
class IdentityData:
    index: int
    frames: list[Frame]
    descriptor: Optional[dict] = None

    def frames_of(self, split: str) -> list[Frame]:
        return [f for f in self.frames if f.split == split]


@dataclass
class PriorDataset:
    identities: list[IdentityData]
    template: TemplateMesh
    resolution: int

    @property
    def num_identities(self) -> int:
        return len(self.identities)

    def validate(self) -> None:
        for ident in self.identities:
            if ident.index >= self.num_identities:
                raise ValueError("identity index out of range")
            for f in ident.frames:
                if f.image.shape[:2] != f.mask.shape[:2]:
                    raise ValueError("mask does not match image dimensions")
                f.pose.validate()
                f.shape.validate()


def load_prior_dataset(path) -> PriorDataset:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != "handprior-dataset":
        raise ValueError(f"{path} is not a dataset directory")
    template = load_template(root / "template.obj", root / "template_rig.json")
    identities = []
    for i, name in enumerate(manifest["identities"]):
        index = json.loads((root / name / "index.json").read_text())
        frames = []
        for fr in index["frames"]:
            frames.append(
                Frame(
                    image=load_png(root / name / fr["image"]),
                    mask=load_png(root / name / fr["mask"]) > 0.5,
                    pose=PoseParams(
                        global_rotation=torch.as_tensor(fr["pose"]["global_rotation"], dtype=torch.float64),
                        global_translation=torch.as_tensor(fr["pose"]["global_translation"], dtype=torch.float64),
                        joint_rotations=torch.as_tensor(fr["pose"]["joint_rotations"], dtype=torch.float64),
                    ),
                    shape=ShapeParams(torch.as_tensor(fr["shape"], dtype=torch.float64)),
                    camera=Camera.from_dict(fr["camera"]),
                    split=fr["split"],
                )
            )
        identities.append(IdentityData(index=i, frames=frames, descriptor=index.get("descriptor")))
    ds = PriorDataset(identities=identities, template=template, resolution=manifest["resolution"])
    ds.validate()
    return ds


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 1
    patch_size: int = 32
    learning_rate: float = 5e-4
    decay_rate: float = 0.1
    decay_interval: Optional[int] = None  # defaults to the full run
    seed: int = 0
    occ_points: int = 256
    jitter: bool = True
    num_samples: int = 64
    knn_method: str = "auto"
    log_every: int = 10
    log_path: Optional[str] = None
    checkpoint_dir: Optional[str] = None
    checkpoint_every: Optional[int] = None

    def validate(self) -> None:
        if self.steps <= 0 or self.patch_size <= 0 or self.batch_size <= 0:
            raise ValueError("counts must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")

    def lr_at(self, step: int) -> float:
        interval = self.decay_interval or self.steps
        return self.learning_rate * self.decay_rate ** (step / interval)


def sample_shape_params(basis_scales: np.ndarray, seed: int, bound: float = 3.0) -> ShapeParams:
    """Uniform draw within +-bound standard deviations per shape axis."""
    scales = np.asarray(basis_scales, dtype=np.float64)
    if (scales <= 0).any():
        raise ValueError("basis scales must be positive")
    rng = rng_from_seed(seed, "shape_params")
    coeff = rng.uniform(-bound * scales, bound * scales)
    return ShapeParams(torch.as_tensor(coeff, dtype=torch.float64))


def sample_occupancy_points(
    posed: PosedMesh, count: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Half near-surface (Gaussian offset), half uniform in the dilated box."""
    rng = rng_from_seed(seed, "occ_points")
    verts = posed.vertices.detach().cpu().numpy()
    faces = posed.faces
    lo, hi = verts.min(axis=0), verts.max(axis=0)
    center = 0.5 * (lo + hi)
    radius = float(np.linalg.norm(verts - center, axis=1).max())
    pad = 0.15 * radius
    n_uniform = count // 2
    n_surface = count - n_uniform
    uniform = rng.uniform(lo - pad, hi + pad, size=(n_uniform, 3))
    tris = verts[faces]
    areas = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    fidx = rng.choice(len(faces), size=n_surface, p=areas / areas.sum())
    bary = rng.dirichlet(np.ones(3), size=n_surface)
    surf = (tris[fidx] * bary[:, :, None]).sum(axis=1)
    surf = surf + rng.normal(scale=0.02 * radius, size=surf.shape)
    points = np.concatenate([uniform, surf])
    labels = occupancy_ground_truth(points, posed, seed=seed)
    return points, labels.astype(np.float64)


def _append_log(path: Optional[str], record: dict) -> None:
    if path is None:
        return
    with open(path, "a") as f:
        f.write(json.dumps(record) + "\n")


@dataclass
class OccupancyPretrainConfig:
    steps: int = 1500
    learning_rate: float = 5e-4
    decay_rate: float = 0.1
    seed: int = 0
    points: int = 256
    log_every: int = 25
    log_path: Optional[str] = None

    def lr_at(self, step: int) -> float:
        return self.learning_rate * self.decay_rate ** (step / self.steps)


def pretrain_occupancy(
    model: PriorModel,
    mesh_factory: Callable[[int], tuple[PoseParams, ShapeParams, PosedMesh]],
    config: OccupancyPretrainConfig,
    checkpoint_path: Optional[str] = None,
) -> list[dict]:
    """Train the occupancy net on randomized shapes/poses with MSE labels."""
    dtype = model.identity_codes.dtype
    params = list(model.occupancy_field.parameters())
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    history = []
    for step in range(config.steps):
        for g in opt.param_groups:
            g["lr"] = config.lr_at(step)
        pose, shape, posed = mesh_factory(step)
        posed = PosedMesh(
            vertices=posed.vertices.to(dtype),
            faces=posed.faces,
            joint_rotations_world=posed.joint_rotations_world.to(dtype),
            joint_positions=posed.joint_positions.to(dtype),
            template=posed.template,
        )
        pts, labels = sample_occupancy_points(posed, config.points, seed=config.seed * 100003 + step)
        pred = model.occupancy_field(
            torch.as_tensor(pts, dtype=dtype), posed, pose.finger_pose.to(dtype)
        )
        loss = loss_occ(pred, torch.as_tensor(labels, dtype=dtype))
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"occupancy pretraining diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.log_every == 0 or step == config.steps - 1:
            rec = {"step": step, "loss": float(loss), "lr": config.lr_at(step)}
            history.append(rec)
            _append_log(config.log_path, rec)
    if checkpoint_path is not None:
        save_model(checkpoint_path, model, {"stage": "occupancy_pretrain"})
    return history


def occupancy_accuracy(
    model: PriorModel,
    mesh_factory: Callable[[int], tuple[PoseParams, ShapeParams, PosedMesh]],
    num_meshes: int = 8,
    points_per_mesh: int = 512,
    seed: int = 7777,
) -> float:
    """Held-out classification accuracy at the 0.5 level set."""
    dtype = model.identity_codes.dtype
    correct = total = 0
    with torch.no_grad():
        for i in range(num_meshes):
            pose, shape, posed = mesh_factory(10_000_000 + seed + i)
            pts, labels = sample_occupancy_points(posed, points_per_mesh, seed=seed + i)
            pred = model.occupancy_field(
                torch.as_tensor(pts, dtype=dtype), posed, pose.finger_pose.to(dtype)
            )
            correct += int(((pred.numpy() >= 0.5) == (labels >= 0.5)).sum())
            total += len(labels)
    return correct / total


def _patch_origin(mask: np.ndarray, patch: int, rng: np.random.Generator) -> Optional[tuple[int, int]]:
    """Top-left of a patch whose center falls in the dilated mask box."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None
    h, w = mask.shape
    y0, y1 = ys.min(), ys.max()
    x0, x1 = xs.min(), xs.max()
    dy = max(1, int(0.1 * (y1 - y0 + 1)))
    dx = max(1, int(0.1 * (x1 - x0 + 1)))
    cy = rng.integers(max(0, y0 - dy), min(h - 1, y1 + dy) + 1)
    cx = rng.integers(max(0, x0 - dx), min(w - 1, x1 + dx) + 1)
    top = int(np.clip(cy - patch // 2, 0, max(0, h - patch)))
    left = int(np.clip(cx - patch // 2, 0, max(0, w - patch)))
    return top, left


def posed_mesh_for_frame(model: PriorModel, frame: Frame, identity: int, refine: bool = True) -> PosedMesh:
    dtype = model.identity_codes.dtype
    template = model.template
    if refine:
        code = model.identity_codes[identity]
        template = refine_template(template, frame.pose, code, model.refiner)
    return lbs_pose(template, frame.pose, frame.shape, dtype=dtype)


def train_prior(
    model: PriorModel,
    dataset: PriorDataset,
    config: TrainConfig,
    weights: LossWeights = LossWeights(),
) -> list[dict]:
    """End-to-end stage-1 loop over identities, frames, and pixel patches."""
    config.validate()
    weights.validate()
    dtype = model.identity_codes.dtype
    if dataset.num_identities != model.num_identities:
        raise ValueError("dataset/model identity count mismatch")
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    history = []
    for step in range(config.steps):
        for g in opt.param_groups:
            g["lr"] = config.lr_at(step)
        terms = {"l_rec": 0.0, "l_shape": 0.0, "l_occ": 0.0, "l_shadow": 0.0}
        loss_total = None
        for b in range(config.batch_size):
            rng = rng_from_seed(config.seed, "train_step", step, b)
            ident = int(rng.integers(dataset.num_identities))
            frames = dataset.identities[ident].frames_of("train")
            frame = frames[int(rng.integers(len(frames)))]
            origin = _patch_origin(frame.mask, config.patch_size, rng)
            if origin is None:
                warnings.warn(f"step {step}: empty mask frame skipped")
                continue
            top, left = origin
            ph = min(config.patch_size, frame.image.shape[0])
            pw = min(config.patch_size, frame.image.shape[1])
            gy, gx = np.meshgrid(np.arange(top, top + ph), np.arange(left, left + pw), indexing="ij")
            pixels = np.stack([gx.ravel(), gy.ravel()], axis=1)

            code = model.identity_codes[ident]
            posed = lbs_pose(
                refine_template(model.template, frame.pose, code, model.refiner),
                frame.pose,
                frame.shape,
                dtype=dtype,
            )
            options = RenderOptions(
                num_samples=config.num_samples,
                jitter=config.jitter,
                seed=int(rng.integers(1 << 31)),
                knn_method=config.knn_method,
            )
            color, alpha, shadow_vals = render_pixels(
                model, posed, frame.pose, code, frame.camera, pixels, options, return_samples=True
            )
            target = torch.as_tensor(frame.image[gy, gx], dtype=dtype).reshape(-1, 3)
            mask_patch = torch.as_tensor(frame.mask[gy, gx], dtype=dtype).reshape(-1)

            l_rec = loss_rec(color.reshape(ph, pw, 3), target.reshape(ph, pw, 3))
            l_shape = loss_shape(alpha, mask_patch)
            pts, labels = sample_occupancy_points(
                posed, config.occ_points, seed=int(rng.integers(1 << 31))
            )
            pred_occ = model.occupancy_field(
                torch.as_tensor(pts, dtype=dtype), posed, frame.pose.finger_pose.to(dtype)
            )
            l_occ = loss_occ(pred_occ, torch.as_tensor(labels, dtype=dtype))
            l_shadow = loss_shadow(shadow_vals)
            loss = total_prior_loss(l_shape, l_occ, l_rec, l_shadow, weights)
            loss_total = loss if loss_total is None else loss_total + loss
            for key, val in (("l_rec", l_rec), ("l_shape", l_shape), ("l_occ", l_occ), ("l_shadow", l_shadow)):
                terms[key] += float(val) / config.batch_size
        if loss_total is None:
            continue
        loss_total = loss_total / config.batch_size
        if not torch.isfinite(loss_total):
            raise TrainingDiverged(f"prior training diverged at step {step}")
        opt.zero_grad()
        loss_total.backward()
        opt.step()
        if step % config.log_every == 0 or step == config.steps - 1:
            rec = {"step": step, "loss": float(loss_total), "lr": config.lr_at(step), **terms}
            history.append(rec)
            _append_log(config.log_path, rec)
        if (
            config.checkpoint_dir is not None
            and config.checkpoint_every
            and (step + 1) % config.checkpoint_every == 0
        ):
            save_model(
                Path(config.checkpoint_dir) / f"checkpoint_{step + 1:06d}.zip",
                model,
                {"stage": "prior", "step": step + 1},
            )
    return history


def evaluate_prior(
    model: PriorModel,
    dataset: PriorDataset,
    split: str = "eval",
    options: Optional[RenderOptions] = None,
) -> dict:
    """Image metrics per identity and aggregate on the given split's frames."""
    options = options or RenderOptions(jitter=False)
    per_frame = []
    with torch.no_grad():
        for ident in dataset.identities:
            code = model.identity_codes[ident.index]
            for fi, frame in enumerate(ident.frames_of(split)):
                posed = posed_mesh_for_frame(model, frame, ident.index)
                pixels = frame.camera.pixel_grid()
                color, alpha = render_pixels(
                    model, posed, frame.pose, code, frame.camera, pixels, options
                )
                h, w = frame.camera.height, frame.camera.width
                rendered = color.reshape(h, w, 3).numpy()
                m = image_metrics(rendered, frame.image)
                m.update({"identity": ident.index, "frame": fi})
                per_frame.append(m)
    keys = ("psnr", "perceptual", "ssim")
    per_identity = []
    for ident in dataset.identities:
        rows = [m for m in per_frame if m["identity"] == ident.index]
        if rows:
            per_identity.append(
                {"identity": ident.index, **{k: float(np.mean([r[k] for r in rows])) for k in keys}}
            )
    aggregate = {k: float(np.mean([r[k] for r in per_frame])) for k in keys} if per_frame else {}
    return {"per_frame": per_frame, "per_identity": per_identity, "aggregate": aggregate}
