"""Articulated hand mesh scaffold.

Template mesh with a skinning rig, shape-basis deformation, linear blend
skinning, learned template refinement, and barycentric surface anchors that
implicit fields hang their encodings on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .utils import axis_angle_to_matrix, rng_from_seed, to_tensor


@dataclass
class TemplateMesh:
    """Canonical-space triangle mesh plus its rig.

    vertices: (V, 3) float64 tensor, canonical pose.
    faces: (F, 3) int64 array of vertex indices.
    skinning_weights: (V, B) rows nonnegative, summing to 1.
    rest_joints: (B, 3) rest-pose joint positions (rigid rest transforms are
        pure translations to these points).
    shape_basis: (V, 3, S) linear displacement basis, normalized so one unit
        of each coefficient is one plausible standard deviation.
    joint_parents: (B,) parent index per joint, -1 for the root.
    joint_names: B labels (root first).
    """

    vertices: torch.Tensor
    faces: np.ndarray
    skinning_weights: torch.Tensor
    rest_joints: torch.Tensor
    shape_basis: torch.Tensor
    joint_parents: np.ndarray
    joint_names: list[str]

    @property
    def num_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def num_joints(self) -> int:
        return int(self.rest_joints.shape[0])

    @property
    def num_shape_axes(self) -> int:
        return int(self.shape_basis.shape[2])

    @property
    def shape_scales(self) -> np.ndarray:
        """Per-axis scale of the shape basis (unit by construction)."""
        return np.ones(self.num_shape_axes)

    def validate(self) -> None:
        if self.faces.min() < 0 or self.faces.max() >= self.num_vertices:
            raise ValueError("face index out of range")
        w = self.skinning_weights
        if (w < -1e-12).any():
            raise ValueError("negative skinning weight")
        if (w.sum(dim=1) - 1.0).abs().max() > 1e-6:
            raise ValueError("skinning weight rows must sum to 1")
        parents = self.joint_parents
        if parents[0] != -1 or (parents[1:] >= np.arange(1, len(parents))).any():
            raise ValueError("joint parents must form a tree rooted at index 0")

    def with_vertices(self, vertices: torch.Tensor) -> "TemplateMesh":
        return TemplateMesh(
            vertices=vertices,
            faces=self.faces,
            skinning_weights=self.skinning_weights,
            rest_joints=self.rest_joints,
            shape_basis=self.shape_basis,
            joint_parents=self.joint_parents,
            joint_names=list(self.joint_names),
        )

    def joint_index(self, name: str) -> int:
        return self.joint_names.index(name)

    def joint_children(self, j: int) -> list[int]:
        return [int(c) for c in np.nonzero(self.joint_parents == j)[0]]

    def bone_tails(self) -> torch.Tensor:
        """Rest-space distal endpoint of each joint's bone segment.

        First child's rest position when one exists; leaves extrapolate their
        own offset from the parent.
        """
        tails = torch.empty_like(self.rest_joints)
        for j in range(self.num_joints):
            children = self.joint_children(j)
            if children:
                tails[j] = self.rest_joints[children[0]]
            else:
                p = self.joint_parents[j]
                tails[j] = 2.0 * self.rest_joints[j] - self.rest_joints[p]
        return tails


@dataclass
class PoseParams:
    """Global rigid motion plus per-joint axis-angle rotations (root excluded)."""

    global_rotation: torch.Tensor  # (3,) axis-angle
    global_translation: torch.Tensor  # (3,)
    joint_rotations: torch.Tensor  # (B-1, 3) axis-angle

    @classmethod
    def identity(cls, num_joints: int, dtype=torch.float64) -> "PoseParams":
        return cls(
            global_rotation=torch.zeros(3, dtype=dtype),
            global_translation=torch.zeros(3, dtype=dtype),
            joint_rotations=torch.zeros(num_joints - 1, 3, dtype=dtype),
        )

    @property
    def finger_pose(self) -> torch.Tensor:
        """Articulation-only conditioning vector: joint rotations, flattened."""
        return self.joint_rotations.reshape(-1)

    def validate(self) -> None:
        for t in (self.global_rotation, self.global_translation, self.joint_rotations):
            if not torch.isfinite(t).all():
                raise ValueError("non-finite pose values")

    def replace(self, **kw) -> "PoseParams":
        args = {
            "global_rotation": self.global_rotation,
            "global_translation": self.global_translation,
            "joint_rotations": self.joint_rotations,
        }
        args.update(kw)
        return PoseParams(**args)


@dataclass
class ShapeParams:
    """Coefficients over the template's shape basis, in basis-scale units."""

    coefficients: torch.Tensor

    @classmethod
    def zeros(cls, num_axes: int, dtype=torch.float64) -> "ShapeParams":
        return cls(torch.zeros(num_axes, dtype=dtype))

    def validate(self, scales: Optional[np.ndarray] = None) -> None:
        if not torch.isfinite(self.coefficients).all():
            raise ValueError("non-finite shape coefficients")
        if scales is not None:
            bound = 3.0 * torch.as_tensor(scales, dtype=self.coefficients.dtype)
            if (self.coefficients.abs() > bound + 1e-9).any():
                raise ValueError("shape coefficients outside the plausible +-3 sigma range")


@dataclass
class PosedMesh:
    """LBS output: posed vertices plus the posed joint frames used to skin them."""

    vertices: torch.Tensor  # (V, 3)
    faces: np.ndarray
    joint_rotations_world: torch.Tensor  # (B, 3, 3)
    joint_positions: torch.Tensor  # (B, 3)
    template: TemplateMesh

    def bone_segments(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Posed (start, end) of each joint's bone segment."""
        tails_rest = self.template.bone_tails()
        rel = tails_rest - self.template.rest_joints.to(tails_rest.dtype)
        ends = self.joint_positions + torch.einsum(
            "bij,bj->bi", self.joint_rotations_world, rel.to(self.joint_positions.dtype)
        )
        return self.joint_positions, ends


def positional_encoding(points: torch.Tensor, num_frequencies: int) -> torch.Tensor:
    """Concatenate raw coordinates with sin/cos at octave frequencies 2^0..2^(n-1)."""
    if num_frequencies < 0:
        raise ValueError("num_frequencies must be >= 0")
    if num_frequencies == 0:
        return points
    freqs = 2.0 ** torch.arange(num_frequencies, dtype=points.dtype, device=points.device)
    scaled = points[..., None] * freqs  # (..., 3, F)
    flat = scaled.reshape(points.shape[:-1] + (-1,))
    return torch.cat([points, torch.sin(flat), torch.cos(flat)], dim=-1)


class TemplateRefiner(nn.Module):
    """Per-vertex offset predictor conditioned on articulation and identity.

    Input rows are [positional_encoding(vertex), finger pose, identity code].
    The final layer is zero-initialized so an untrained refiner is a no-op.
    """

    def __init__(
        self,
        num_frequencies: int = 4,
        pose_dim: int = 45,
        code_dim: int = 33,
        hidden: int = 128,
        layers: int = 4,
        dtype=torch.float64,
    ):
        super().__init__()
        self.num_frequencies = num_frequencies
        self.pose_dim = pose_dim
        self.code_dim = code_dim
        in_dim = 3 + 6 * num_frequencies + pose_dim + code_dim
        dims = [in_dim] + [hidden] * (layers - 1) + [3]
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1], dtype=dtype) for i in range(layers)
        )
        nn.init.zeros_(self.layers[-1].weight)
        nn.init.zeros_(self.layers[-1].bias)

    def forward(self, encoded: torch.Tensor, finger_pose: torch.Tensor, code: torch.Tensor) -> torch.Tensor:
        n = encoded.shape[0]
        expected = encoded.shape[1] + finger_pose.numel() + code.numel()
        if expected != self.layers[0].in_features:
            raise ValueError(
                f"refiner input width {expected} does not match model width "
                f"{self.layers[0].in_features}"
            )
        cond = torch.cat([finger_pose.reshape(-1), code.reshape(-1)])
        h = torch.cat([encoded, cond.unsqueeze(0).expand(n, -1)], dim=1)
        for layer in self.layers[:-1]:
            h = torch.nn.functional.silu(layer(h))
        return self.layers[-1](h)


def refine_template(
    template: TemplateMesh,
    pose: PoseParams,
    code: torch.Tensor,
    refiner: TemplateRefiner,
) -> TemplateMesh:
    """Add predicted per-vertex offsets to the template; topology unchanged."""
    dtype = refiner.layers[0].weight.dtype
    verts = template.vertices.to(dtype)
    encoded = positional_encoding(verts, refiner.num_frequencies)
    offsets = refiner(encoded, pose.finger_pose.to(dtype), code.to(dtype))
    return template.with_vertices(verts + offsets)


def _joint_world_transforms(
    template: TemplateMesh, joint_rotations: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward kinematics along the joint tree.

    Returns world rotations (B, 3, 3) and world joint positions (B, 3) for
    the articulated (pre-global) pose. The root carries no rotation of its
    own; entry j of `joint_rotations` drives joint j + 1.
    """
    dtype = joint_rotations.dtype
    rest = template.rest_joints.to(dtype)
    B = template.num_joints
    rots = [torch.eye(3, dtype=dtype)]
    pos = [rest[0]]
    local = axis_angle_to_matrix(joint_rotations)
    for j in range(1, B):
        p = int(template.joint_parents[j])
        r_world = rots[p] @ local[j - 1]
        t_world = pos[p] + rots[p] @ (rest[j] - rest[p])
        rots.append(r_world)
        pos.append(t_world)
    return torch.stack(rots), torch.stack(pos)


def lbs_pose(
    template: TemplateMesh,
    pose: PoseParams,
    shape: Optional[ShapeParams] = None,
    dtype=torch.float64,
) -> PosedMesh:
    """Shape-deform then skin the template; global rotation/translation last."""
    pose.validate()
    verts = template.vertices.to(dtype)
    if shape is not None:
        shape.validate()
        verts = verts + torch.einsum(
            "vds,s->vd", template.shape_basis.to(dtype), shape.coefficients.to(dtype)
        )
    joint_rot = pose.joint_rotations.to(dtype)
    rots, pos = _joint_world_transforms(template, joint_rot)
    rest = template.rest_joints.to(dtype)
    # per-joint skinning transform: x -> R_j (x - rest_j) + pos_j
    w = template.skinning_weights.to(dtype)  # (V, B)
    local = verts[:, None, :] - rest[None, :, :]  # (V, B, 3)
    moved = torch.einsum("bij,vbj->vbi", rots, local) + pos[None, :, :]
    skinned = (w[:, :, None] * moved).sum(dim=1)
    g_rot = axis_angle_to_matrix(pose.global_rotation.to(dtype))
    out = skinned @ g_rot.T + pose.global_translation.to(dtype)
    joint_pos_world = pos @ g_rot.T + pose.global_translation.to(dtype)
    joint_rot_world = g_rot[None] @ rots
    return PosedMesh(
        vertices=out,
        faces=template.faces,
        joint_rotations_world=joint_rot_world,
        joint_positions=joint_pos_world,
        template=template,
    )


@dataclass
class AnchorSet:
    """Surface anchors at one resolution level.

    Face indices and barycentric coordinates are frozen at sampling time;
    the per-anchor encodings are the only learnable part.
    """

    face_indices: np.ndarray  # (N,)
    barycentric: np.ndarray  # (N, 3)
    encodings: Optional[torch.Tensor]  # (N, C) parameter, or None for plain anchors
    resolution_level: int = 0

    def __post_init__(self):
        self.face_indices = np.asarray(self.face_indices, dtype=np.int64)
        self.barycentric = np.asarray(self.barycentric, dtype=np.float64)
        self.face_indices.setflags(write=False)
        self.barycentric.setflags(write=False)
        b = self.barycentric
        if (b < -1e-12).any() or np.abs(b.sum(axis=1) - 1.0).max() > 1e-6:
            raise ValueError("barycentric rows must be nonnegative and sum to 1")
        self._cache: dict = {}

    def __len__(self) -> int:
        return len(self.face_indices)

    def bary_tensor(self, dtype) -> torch.Tensor:
        key = ("bary", dtype)
        if key not in self._cache:
            self._cache[key] = torch.as_tensor(self.barycentric.copy(), dtype=dtype)
        return self._cache[key]

    def face_tensor(self) -> torch.Tensor:
        if "faces" not in self._cache:
            self._cache["faces"] = torch.as_tensor(self.face_indices.copy(), dtype=torch.long)
        return self._cache["faces"]


def sample_anchors(
    mesh: TemplateMesh,
    count: int,
    seed: int,
    encoding_dim: Optional[int] = None,
    level: int = 0,
    init_scale: float = 0.1,
    dtype=torch.float64,
) -> AnchorSet:
    """Area-weighted face choice with uniform barycentric placement per face."""
    if count < 1:
        raise ValueError("anchor count must be >= 1")
    if len(mesh.faces) == 0:
        raise ValueError("cannot sample anchors on an empty mesh")
    rng = rng_from_seed(seed, "anchors", level, count)
    verts = mesh.vertices.detach().cpu().numpy()
    tris = verts[mesh.faces]
    areas = 0.5 * np.linalg.norm(
        np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1
    )
    probs = areas / areas.sum()
    faces = rng.choice(len(mesh.faces), size=count, p=probs)
    bary = rng.dirichlet(np.ones(3), size=count)
    enc = None
    if encoding_dim is not None:
        enc = torch.as_tensor(
            rng.normal(scale=init_scale, size=(count, encoding_dim)), dtype=dtype
        )
    return AnchorSet(face_indices=faces, barycentric=bary, encodings=enc, resolution_level=level)


def anchor_positions(anchors: AnchorSet, posed: PosedMesh | TemplateMesh) -> torch.Tensor:
    """Barycentric combination of each anchor's face corners on the given mesh."""
    if anchors.face_indices.max() >= len(posed.faces):
        raise ValueError("anchor face index out of range for this mesh")
    verts = posed.vertices
    key = ("corner_idx", id(posed.faces))
    if key not in anchors._cache:
        anchors._cache[key] = torch.as_tensor(
            posed.faces[anchors.face_indices].copy(), dtype=torch.long
        )
    corners = verts[anchors._cache[key]]
    bary = anchors.bary_tensor(verts.dtype)
    return (corners * bary[:, :, None]).sum(dim=1)


# --- mesh + rig file formats -------------------------------------------------

def save_obj(path, mesh: TemplateMesh | PosedMesh) -> None:
    verts = mesh.vertices.detach().cpu().numpy()
    lines = [f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}" for v in verts]
    lines += [f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}" for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64)


def save_rig(path, mesh: TemplateMesh) -> None:
    """Sidecar JSON holding everything the OBJ cannot: weights, tree, basis."""
    data = {
        "format": "handprior-rig",
        "version": 1,
        "skinning_weights": mesh.skinning_weights.detach().cpu().numpy().tolist(),
        "rest_joints": mesh.rest_joints.detach().cpu().numpy().tolist(),
        "shape_basis": mesh.shape_basis.detach().cpu().numpy().tolist(),
        "joint_parents": mesh.joint_parents.tolist(),
        "joint_names": list(mesh.joint_names),
    }
    Path(path).write_text(json.dumps(data))


def load_template(obj_path, rig_path) -> TemplateMesh:
    verts, faces = load_obj(obj_path)
    rig = json.loads(Path(rig_path).read_text())
    if rig.get("format") != "handprior-rig":
        raise ValueError(f"{rig_path} is not a rig sidecar file")
    mesh = TemplateMesh(
        vertices=torch.as_tensor(verts, dtype=torch.float64),
        faces=faces,
        skinning_weights=torch.as_tensor(rig["skinning_weights"], dtype=torch.float64),
        rest_joints=torch.as_tensor(rig["rest_joints"], dtype=torch.float64),
        shape_basis=torch.as_tensor(rig["shape_basis"], dtype=torch.float64),
        joint_parents=np.asarray(rig["joint_parents"], dtype=np.int64),
        joint_names=list(rig["joint_names"]),
    )
    mesh.validate()
    return mesh
