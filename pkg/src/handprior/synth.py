"""Procedural verification universe: hands, identities, exact renders.

The hand is a capsule composite (palm plus five three-segment fingers, 16
joints) built watertight per part, with segment caps centered on joint pivots
so articulation never tears the union. Identities are analytic surface albedo
functions. Ground-truth frames come from exact ray casting, never from the
model's own compositor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from . import geometry
from .mesh import PoseParams, PosedMesh, ShapeParams, TemplateMesh, lbs_pose, save_obj, save_rig
from .render import Camera, look_at_camera
from .utils import rng_from_seed

FINGERS = ("middle", "index", "ring", "pinky", "thumb")


def _capsule(
    head: np.ndarray,
    tail: np.ndarray,
    radius_x: float,
    radius_z: float,
    n_circ: int,
    n_len: int,
    n_cap: int,
    taper: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Closed capsule from head to tail with elliptic cross-section.

    End caps are (elliptic) hemispheres centered exactly on head/tail, so a
    chain of capsules sharing joint positions stays overlapped under any
    rotation about those joints. `taper` scales the tail-end cross-section.
    """
    axis = tail - head
    length = np.linalg.norm(axis)
    y = axis / length
    ref = np.array([0.0, 0.0, 1.0]) if abs(y[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(y, ref)
    x /= np.linalg.norm(x)
    z = np.cross(x, y)
    phi = np.linspace(0.0, 2.0 * np.pi, n_circ, endpoint=False)
    cos_p, sin_p = np.cos(phi), np.sin(phi)
    cap_r = min(radius_x, radius_z)

    rows = []  # (ring center, radial scale)
    for i in range(n_cap - 1, 0, -1):  # bottom hemisphere, pole to equator
        a = (np.pi / 2.0) * i / n_cap
        rows.append((head - y * (cap_r * np.sin(a)), np.cos(a)))
    for i in range(n_len + 1):  # cylinder, tapering toward the tail
        t = i / n_len
        rows.append((head + axis * t, 1.0 + (taper - 1.0) * t))
    for i in range(1, n_cap):  # top hemisphere, equator to pole
        a = (np.pi / 2.0) * i / n_cap
        rows.append((tail + y * (cap_r * taper * np.sin(a)), np.cos(a) * taper))

    verts = []
    for center, scale in rows:
        for c, s in zip(cos_p, sin_p):
            verts.append(center + x * (radius_x * scale * c) + z * (radius_z * scale * s))
    verts.append(head - y * cap_r)  # bottom pole
    verts.append(tail + y * cap_r * taper)  # top pole
    verts = np.asarray(verts)

    n_rows = len(rows)
    faces = []
    for r in range(n_rows - 1):
        for c in range(n_circ):
            a = r * n_circ + c
            b = r * n_circ + (c + 1) % n_circ
            faces.append([a, b + n_circ, b])
            faces.append([a, a + n_circ, b + n_circ])
    bp, tp = len(verts) - 2, len(verts) - 1
    top0 = (n_rows - 1) * n_circ
    for c in range(n_circ):
        faces.append([bp, (c + 1) % n_circ, c])
        faces.append([tp, top0 + c, top0 + (c + 1) % n_circ])
    faces = np.asarray(faces, dtype=np.int64)
    # normalize to outward orientation (positive signed volume)
    tri = verts[faces]
    vol = np.einsum("fi,fi->f", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum()
    if vol < 0:
        faces = faces[:, [0, 2, 1]]
    return verts, faces


def make_synthetic_hand(seed: int = 0) -> TemplateMesh:
    """Capsule-composite hand template with rig and 4-axis shape basis."""
    rng = rng_from_seed(seed, "hand")
    jig = lambda lo=0.96, hi=1.04: rng.uniform(lo, hi)

    palm_len = 0.45 * jig()
    palm_rx = 0.18 * jig()
    palm_rz = 0.055 * jig()
    finger_spec = {
        "middle": dict(mcp=np.array([0.0, palm_len, 0.0]), d=np.array([0.0, 1.0, 0.0]),
                       lens=np.array([0.18, 0.14, 0.11]), r=0.042),
        "index": dict(mcp=np.array([-0.105 * palm_rx / 0.18, palm_len, 0.0]), d=np.array([-0.08, 1.0, 0.0]),
                      lens=np.array([0.16, 0.12, 0.10]), r=0.040),
        "ring": dict(mcp=np.array([0.085 * palm_rx / 0.18, palm_len, 0.0]), d=np.array([0.08, 1.0, 0.0]),
                     lens=np.array([0.16, 0.12, 0.10]), r=0.039),
        "pinky": dict(mcp=np.array([0.165 * palm_rx / 0.18, palm_len * 0.98, 0.0]), d=np.array([0.18, 1.0, 0.0]),
                      lens=np.array([0.12, 0.09, 0.08]), r=0.034),
        "thumb": dict(mcp=np.array([-0.155 * palm_rx / 0.18, 0.12, 0.0]), d=np.array([-0.78, 0.72, 0.0]),
                      lens=np.array([0.14, 0.11, 0.09]), r=0.048),
    }
    for name, spec in finger_spec.items():
        spec["d"] = spec["d"] / np.linalg.norm(spec["d"])
        spec["lens"] = spec["lens"] * jig()
        spec["r"] = spec["r"] * jig()

    joint_names = ["wrist"]
    joint_parents = [-1]
    joints = [np.zeros(3)]
    for name in FINGERS:
        spec = finger_spec[name]
        base = len(joints)
        pos = spec["mcp"].copy()
        for k in range(3):
            joint_names.append(f"{name}{k + 1}")
            joint_parents.append(0 if k == 0 else base + k - 1)
            joints.append(pos.copy())
            pos = pos + spec["d"] * spec["lens"][k]
        spec["tip"] = pos.copy()
    joints = np.asarray(joints)

    all_verts, all_faces, vert_joint, vert_finger = [], [], [], []

    def add_part(verts, faces, joint_idx, finger_idx):
        off = sum(len(v) for v in all_verts)
        all_verts.append(verts)
        all_faces.append(faces + off)
        vert_joint.extend([joint_idx] * len(verts))
        vert_finger.extend([finger_idx] * len(verts))

    pv, pf = _capsule(
        np.array([0.0, 0.015, 0.0]), np.array([0.0, palm_len, 0.0]),
        palm_rx, palm_rz, n_circ=18, n_len=6, n_cap=4,
    )
    add_part(pv, pf, 0, -1)
    taper = (1.0, 0.93, 0.86)
    for fi, name in enumerate(FINGERS):
        spec = finger_spec[name]
        chain = [spec["mcp"]]
        for k in range(3):
            chain.append(chain[-1] + spec["d"] * spec["lens"][k])
        for k in range(3):
            r = spec["r"] * taper[k]
            cv, cf = _capsule(chain[k], chain[k + 1], r, r, n_circ=14, n_len=3, n_cap=3,
                              taper=0.95)
            add_part(cv, cf, 1 + fi * 3 + k, fi)

    vertices = np.concatenate(all_verts)
    faces = np.concatenate(all_faces)
    vert_joint = np.asarray(vert_joint)
    vert_finger = np.asarray(vert_finger)
    nv, nb = len(vertices), len(joints)

    weights = np.zeros((nv, nb))
    weights[np.arange(nv), vert_joint] = 1.0

    # shape basis: global scale, finger length, finger thickness, palm width
    basis = np.zeros((nv, 3, 4))
    basis[:, :, 0] = 0.06 * vertices
    for fi, name in enumerate(FINGERS):
        sel = vert_finger == fi
        spec = finger_spec[name]
        along = (vertices[sel] - spec["mcp"]) @ spec["d"]
        basis[sel, :, 1] = 0.08 * np.clip(along, 0.0, None)[:, None] * spec["d"][None]
        proj = spec["mcp"][None] + np.clip(along, 0.0, None)[:, None] * spec["d"][None]
        basis[sel, :, 2] = 0.25 * (vertices[sel] - proj)
        basis[sel, 0, 3] = 0.08 * spec["mcp"][0]
    palm_sel = vert_finger == -1
    basis[palm_sel, 0, 3] = 0.08 * vertices[palm_sel, 0]

    template = TemplateMesh(
        vertices=torch.as_tensor(vertices, dtype=torch.float64),
        faces=faces,
        skinning_weights=torch.as_tensor(weights, dtype=torch.float64),
        rest_joints=torch.as_tensor(joints, dtype=torch.float64),
        shape_basis=torch.as_tensor(basis, dtype=torch.float64),
        joint_parents=np.asarray(joint_parents, dtype=np.int64),
        joint_names=joint_names,
    )
    template.validate()
    return template


def face_part_labels(template: TemplateMesh) -> np.ndarray:
    """Connected-component label per face (palm first, then finger segments)."""
    return geometry.face_components(template.num_vertices, template.faces)


def _flex_axis(direction: np.ndarray) -> np.ndarray:
    a = np.cross(direction, np.array([0.0, 0.0, 1.0]))
    n = np.linalg.norm(a)
    if n < 1e-9:
        a = np.array([1.0, 0.0, 0.0])
        n = 1.0
    return a / n


def sample_pose(
    template: TemplateMesh,
    seed: int,
    curl_scale: float = 1.0,
    with_global: bool = False,
) -> PoseParams:
    """Random plausible articulation: per-joint flexion plus base abduction."""
    rng = rng_from_seed(seed, "pose")
    rest = template.rest_joints.numpy()
    tails = template.bone_tails().numpy()
    rots = np.zeros((template.num_joints - 1, 3))
    ranges = (1.05, 1.25, 0.9)  # max flexion per segment along each finger
    for j in range(1, template.num_joints):
        seg = j - 1
        k = seg % 3
        d = tails[j] - rest[j]
        axis = _flex_axis(d / np.linalg.norm(d))
        angle = rng.uniform(-0.08, ranges[k]) * curl_scale
        rot = Rotation.from_rotvec(axis * angle)
        if k == 0:
            spread = rng.uniform(-0.12, 0.12)
            rot = Rotation.from_rotvec(np.array([0.0, 0.0, 1.0]) * spread) * rot
        rots[seg] = rot.as_rotvec()
    gr = np.zeros(3)
    gt = np.zeros(3)
    if with_global:
        gr = Rotation.random(random_state=int(rng.integers(1 << 31))).as_rotvec()
        gt = rng.uniform(-0.1, 0.1, size=3)
    return PoseParams(
        global_rotation=torch.as_tensor(gr, dtype=torch.float64),
        global_translation=torch.as_tensor(gt, dtype=torch.float64),
        joint_rotations=torch.as_tensor(rots, dtype=torch.float64),
    )


def fist_pose(template: TemplateMesh, amount: float = 1.0) -> PoseParams:
    """Deterministic clench: strong flexion at every finger joint."""
    rest = template.rest_joints.numpy()
    tails = template.bone_tails().numpy()
    rots = np.zeros((template.num_joints - 1, 3))
    per_seg = (1.1, 1.35, 0.95)
    for j in range(1, template.num_joints):
        seg = j - 1
        d = tails[j] - rest[j]
        axis = _flex_axis(d / np.linalg.norm(d))
        rots[seg] = axis * per_seg[seg % 3] * amount
    return PoseParams(
        global_rotation=torch.zeros(3, dtype=torch.float64),
        global_translation=torch.zeros(3, dtype=torch.float64),
        joint_rotations=torch.as_tensor(rots, dtype=torch.float64),
    )


@dataclass
class SyntheticIdentity:
    """Analytic surface albedo: low-frequency ramps, per-part tint, speckle."""

    descriptor: dict

    @classmethod
    def from_seed(cls, seed: int, num_parts: int = 16) -> "SyntheticIdentity":
        rng = rng_from_seed(seed, "identity")
        r = rng.uniform(0.5, 0.85)
        g = r * rng.uniform(0.68, 0.88)
        b = g * rng.uniform(0.65, 0.9)
        base = np.array([r, g, b])
        part_tint = rng.uniform(-0.06, 0.06, size=(num_parts, 3))
        desc = {
            "seed": int(seed),
            "base": base.tolist(),
            "part_tint": part_tint.tolist(),
            "ramp": rng.uniform(-0.10, 0.10, size=3).tolist(),
            "wave_freq": rng.uniform(2.5, 8.0, size=(3, 3)).tolist(),
            "wave_phase": rng.uniform(0.0, 2.0 * np.pi, size=3).tolist(),
            "wave_amp": rng.uniform(0.015, 0.05, size=(3, 3)).tolist(),
            "speckle_freq": rng.uniform(14.0, 28.0, size=(2, 3)).tolist(),
            "speckle_phase": rng.uniform(0.0, 2.0 * np.pi, size=2).tolist(),
            "speckle_amp": float(rng.uniform(0.004, 0.018)),
        }
        return cls(desc)

    def evaluate(self, points: np.ndarray, part_labels: np.ndarray) -> np.ndarray:
        """Albedo at template-space surface points with per-face part labels."""
        d = self.descriptor
        c = np.asarray(d["base"])[None, :] + np.asarray(d["part_tint"])[part_labels]
        c = c + np.asarray(d["ramp"])[None, :] * points[:, 1:2]
        wf = np.asarray(d["wave_freq"])
        wa = np.asarray(d["wave_amp"])
        wp = np.asarray(d["wave_phase"])
        for i in range(wf.shape[0]):
            c = c + wa[i][None, :] * np.sin(points @ wf[i] + wp[i])[:, None]
        sf = np.asarray(d["speckle_freq"])
        sp = np.asarray(d["speckle_phase"])
        for i in range(sf.shape[0]):
            c = c + d["speckle_amp"] * np.sin(points @ sf[i] + sp[i])[:, None]
        return np.clip(c, 0.02, 0.98)


def make_synthetic_identity(seed: int) -> SyntheticIdentity:
    return SyntheticIdentity.from_seed(seed)


def _crevice_shadow(
    hit_points: np.ndarray,
    hit_parts: np.ndarray,
    posed: PosedMesh,
    floor: float = 0.35,
    reach: float = 0.06,
) -> np.ndarray:
    """Ambient-occlusion-style darkening by proximity to other parts' bones."""
    heads, tails = posed.bone_segments()
    heads = heads.detach().cpu().numpy()
    tails = tails.detach().cpu().numpy()
    d = geometry.point_segment_distance(hit_points, heads, tails)  # (N, B)
    n = len(hit_points)
    part_of_joint = np.arange(d.shape[1])
    mask_own = hit_parts[:, None] == part_of_joint[None, :]
    d = np.where(mask_own, np.inf, d)
    dmin = d.min(axis=1)
    t = np.clip(dmin / reach, 0.0, 1.0)
    smooth = t * t * (3.0 - 2.0 * t)
    return floor + (1.0 - floor) * smooth


def render_ground_truth(
    identity: SyntheticIdentity,
    template: TemplateMesh,
    pose: PoseParams,
    shape: ShapeParams,
    camera: Camera,
    shadow_mode: str = "none",
) -> tuple[np.ndarray, np.ndarray]:
    """Exact ray-cast render of the analytic surface albedo.

    Per pixel: nearest ray-mesh hit, albedo evaluated at the hit's template
    position. Shadow is 1 everywhere unless `shadow_mode="crevice"` bakes the
    analytic darkening term. Returns (H, W, 3) float image and boolean mask.
    """
    posed = lbs_pose(template, pose, shape)
    verts = posed.vertices.detach().cpu().numpy()
    tris = verts[template.faces]
    pixels = camera.pixel_grid()
    from .render import generate_rays  # local import keeps module load light

    origins, dirs = generate_rays(camera, pixels)
    t, tri_idx, bary, _, _ = geometry.ray_triangle_hits(
        origins.numpy(), dirs.numpy(), tris
    )
    hit = np.isfinite(t)
    img = np.zeros((camera.height * camera.width, 3))
    if hit.any():
        faces_hit = tri_idx[hit]
        bary_hit = bary[hit]
        tmpl_verts = template.vertices.detach().cpu().numpy()
        corners = tmpl_verts[template.faces[faces_hit]]
        tpos = (corners * bary_hit[:, :, None]).sum(axis=1)
        labels = face_part_labels(template)[faces_hit]
        colors = identity.evaluate(tpos, labels)
        if shadow_mode == "crevice":
            hit_world = origins.numpy()[hit] + dirs.numpy()[hit] * t[hit][:, None]
            # map face component to joint: component 0 is the palm (joint 0),
            # then three segments per finger in construction order
            u = _crevice_shadow(hit_world, labels, posed)
            colors = colors * u[:, None]
        elif shadow_mode != "none":
            raise ValueError(f"unknown shadow mode {shadow_mode!r}")
        img[hit] = colors
    return (
        img.reshape(camera.height, camera.width, 3),
        hit.reshape(camera.height, camera.width),
    )


def orbit_camera(
    center: np.ndarray,
    distance: float,
    azimuth: float,
    elevation: float,
    resolution: int,
    focal_scale: float = 1.35,
) -> Camera:
    pos = center + distance * np.array(
        [
            np.cos(elevation) * np.sin(azimuth),
            np.cos(elevation) * np.cos(azimuth),
            np.sin(elevation),
        ]
    )
    return look_at_camera(
        pos, center, resolution, resolution, focal=focal_scale * resolution
    )


def make_mesh_factory(template: TemplateMesh, seed: int) -> Callable[[int], tuple[PoseParams, ShapeParams, PosedMesh]]:
    """Posed-mesh stream for occupancy pretraining: random pose and shape."""
    from .training import sample_shape_params

    def factory(step: int):
        pose = sample_pose(template, seed=rng_from_seed(seed, "factory_pose", step).integers(1 << 31))
        shape = sample_shape_params(
            template.shape_scales, seed=int(rng_from_seed(seed, "factory_shape", step).integers(1 << 31))
        )
        return pose, shape, lbs_pose(template, pose, shape)

    return factory


def build_prior_dataset(
    out_dir,
    num_identities: int = 4,
    poses_per_identity: int = 8,
    views_per_pose: int = 4,
    resolution: int = 64,
    seed: int = 0,
    eval_poses: int = 2,
    shadow_mode: str = "none",
    camera_distance: float = 2.1,
) -> Path:
    """Render and write a multi-identity dataset the prior trainer consumes.

    Layout: template.obj + template_rig.json + manifest.json at the root, one
    directory per identity with PNG frames/masks and an index.json carrying
    pose, shape, camera, and split per frame.
    """
    from .images import save_png
    from .training import sample_shape_params

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    template = make_synthetic_hand(seed)
    save_obj(out / "template.obj", template)
    save_rig(out / "template_rig.json", template)
    center = template.vertices.numpy().mean(axis=0)

    manifest = {
        "format": "handprior-dataset",
        "version": 1,
        "num_identities": num_identities,
        "poses_per_identity": poses_per_identity,
        "eval_poses": eval_poses,
        "views_per_pose": views_per_pose,
        "resolution": resolution,
        "seed": seed,
        "shadow_mode": shadow_mode,
        "identities": [],
    }
    total_poses = poses_per_identity + eval_poses
    for i in range(num_identities):
        ident_rng = rng_from_seed(seed, "dataset_identity", i)
        identity = make_synthetic_identity(int(ident_rng.integers(1 << 31)))
        shape = sample_shape_params(
            template.shape_scales, seed=int(ident_rng.integers(1 << 31)), bound=1.5
        )
        ident_dir = out / f"identity_{i:02d}"
        ident_dir.mkdir(exist_ok=True)
        frames = []
        fidx = 0
        for p in range(total_poses):
            pose = sample_pose(template, seed=int(rng_from_seed(seed, "dataset_pose", i, p).integers(1 << 31)))
            split = "train" if p < poses_per_identity else "eval"
            for v in range(views_per_pose):
                az = 2.0 * np.pi * (v / views_per_pose) + 0.61803 * p
                el = np.deg2rad(-30.0 + 60.0 * ((v + p) % 3) / 2.0)
                camera = orbit_camera(center, camera_distance, az, el, resolution)
                image, mask = render_ground_truth(identity, template, pose, shape, camera, shadow_mode)
                img_name = f"frame_{fidx:03d}.png"
                mask_name = f"mask_{fidx:03d}.png"
                save_png(ident_dir / img_name, image)
                save_png(ident_dir / mask_name, mask.astype(np.float64))
                frames.append(
                    {
                        "image": img_name,
                        "mask": mask_name,
                        "pose": {
                            "global_rotation": pose.global_rotation.tolist(),
                            "global_translation": pose.global_translation.tolist(),
                            "joint_rotations": pose.joint_rotations.tolist(),
                        },
                        "shape": shape.coefficients.tolist(),
                        "camera": camera.to_dict(),
                        "split": split,
                        "pose_id": p,
                        "view_id": v,
                    }
                )
                fidx += 1
        (ident_dir / "index.json").write_text(
            json.dumps({"identity_index": i, "descriptor": identity.descriptor, "frames": frames})
        )
        manifest["identities"].append(f"identity_{i:02d}")
    (out / "manifest.json").write_text(json.dumps(manifest))
    return out
