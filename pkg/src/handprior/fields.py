"""Implicit fields anchored to the mesh scaffold.

A field value at a 3D query is produced by inverse-distance interpolation of
learnable encodings carried by surface anchors, one set per resolution level,
decoded by per-level perceptrons and a fusion perceptron. Albedo conditions on
an identity code, shadow on articulation, and the occupancy stand-in encodes
queries in the frames of their two nearest skeleton parts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import nn

from . import geometry
from .mesh import AnchorSet, PosedMesh, TemplateMesh, TemplateRefiner, anchor_positions, sample_anchors
from .utils import rng_from_seed, soft_window

KNN_EPS = 1e-8
_TREE_EXTRA = 8  # extra tree candidates before falling back to brute force


@dataclass
class FieldConfig:
    """Size parameters for one multi-resolution field."""

    anchor_counts: tuple[int, ...] = (512, 1024, 2048, 4096)
    neighbor_count: int = 4
    encoding_dim: int = 128
    feature_dim: int = 16
    condition: str = "identity"  # or "finger_pose"
    condition_dim: int = 33
    hidden_width: int = 256
    hidden_layers: int = 4
    fusion_width: int = 64
    fusion_layers: int = 3
    out_dim: int = 3

    @property
    def levels(self) -> int:
        return len(self.anchor_counts)

    def validate(self) -> None:
        if self.levels < 1:
            raise ValueError("need at least one resolution level")
        if list(self.anchor_counts) != sorted(set(self.anchor_counts)):
            raise ValueError("anchor counts must be strictly increasing")
        if self.neighbor_count > min(self.anchor_counts):
            raise ValueError("neighbor count exceeds the smallest anchor count")
        if self.condition not in ("identity", "finger_pose"):
            raise ValueError(f"unknown condition kind {self.condition!r}")


@dataclass
class OccupancyConfig:
    anchor_count: int = 512
    hidden_width: int = 256
    hidden_layers: int = 4
    pose_dim: int = 45
    gate_inner_scale: float = 2.0
    gate_outer_scale: float = 4.0


@dataclass
class ModelConfig:
    albedo: FieldConfig = field(default_factory=FieldConfig)
    shadow: FieldConfig = field(
        default_factory=lambda: FieldConfig(
            anchor_counts=(256,), condition="finger_pose", condition_dim=45, out_dim=1
        )
    )
    occupancy: OccupancyConfig = field(default_factory=OccupancyConfig)
    refiner_hidden: int = 128
    refiner_layers: int = 4
    encoding_frequencies: int = 4
    identity_dim: int = 33
    identity_init_std: float = 0.02
    anchor_seed: int = 0


@dataclass
class FieldSample:
    """Per-query field values; shaded color is shadow times albedo."""

    occupancy: torch.Tensor  # (N,)
    albedo: torch.Tensor  # (N, 3)
    shadow: torch.Tensor  # (N, 1)
    shaded: torch.Tensor  # (N, 3)


def init_identity_codes(count: int, dim: int, std: float, seed: int, dtype=torch.float64) -> torch.Tensor:
    """Truncated-normal identity code table (clipped at two standard deviations)."""
    rng = rng_from_seed(seed, "identity_codes")
    raw = rng.normal(scale=std, size=(count, dim))
    while True:
        bad = np.abs(raw) > 2 * std
        if not bad.any():
            break
        raw[bad] = rng.normal(scale=std, size=int(bad.sum()))
    return torch.as_tensor(raw, dtype=dtype)


# --- k-nearest-neighbour selection -------------------------------------------

def _squared_distances(queries: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    diff = queries[:, None, :] - anchors[None, :, :]
    return np.einsum("qad,qad->qa", diff, diff)


def _stable_topk(d2: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest per row; exact ties go to the lower index."""
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def knn_brute(queries: np.ndarray, anchors: np.ndarray, k: int, chunk: int = 4_000_000) -> np.ndarray:
    n, m = len(queries), len(anchors)
    rows = max(1, chunk // max(m, 1))
    out = np.empty((n, k), dtype=np.int64)
    for s in range(0, n, rows):
        d2 = _squared_distances(queries[s : s + rows], anchors)
        out[s : s + rows] = _stable_topk(d2, k)
    return out


def knn_tree(queries: np.ndarray, anchors: np.ndarray, k: int) -> np.ndarray:
    """Spatial-index candidates re-ranked by the brute-force rule.

    The tree proposes k + extra candidates; rows whose k-th distance is not
    strictly separated from the worst candidate fall back to brute force, so
    the selected neighbor sets are identical to `knn_brute` by construction.
    """
    m = len(anchors)
    kc = min(k + _TREE_EXTRA, m)
    if kc >= m:
        return knn_brute(queries, anchors, k)
    tree = cKDTree(anchors)
    _, cand = tree.query(queries, k=kc)
    gathered = anchors[cand]  # (N, kc, 3)
    diff = queries[:, None, :] - gathered
    d2 = np.einsum("qad,qad->qa", diff, diff)
    # re-rank candidates stably by (distance, original index)
    order = np.lexsort((cand, d2), axis=1)
    rows = np.arange(len(queries))[:, None]
    idx_sorted = cand[rows, order]
    d2_sorted = d2[rows, order]
    safe = d2_sorted[:, k - 1] < d2_sorted[:, -1] * (1.0 - 1e-9) - 1e-30
    out = idx_sorted[:, :k].copy()
    if not safe.all():
        bad = np.nonzero(~safe)[0]
        out[bad] = knn_brute(queries[bad], anchors, k)
    return out


def knn_select(queries: np.ndarray, anchors: np.ndarray, k: int, method: str = "auto") -> np.ndarray:
    if k > len(anchors):
        raise ValueError("k exceeds anchor count")
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    anchors = np.ascontiguousarray(anchors, dtype=np.float64)
    if method == "auto":
        method = "tree" if len(anchors) * len(queries) > 262_144 else "brute"
    if method == "brute":
        idx = knn_brute(queries, anchors, k)
    elif method == "tree":
        idx = knn_tree(queries, anchors, k)
    else:
        raise ValueError(f"unknown knn method {method!r}")
    # lexsort ranks ties by index already; brute path is stable argsort
    return idx


def interpolate(
    queries: torch.Tensor,
    anchor_pos: torch.Tensor,
    encodings: torch.Tensor,
    neighbor_count: int,
    eps: float = KNN_EPS,
    method: str = "auto",
) -> torch.Tensor:
    """Inverse-distance weighted average of the nearest anchors' encodings.

    Weights are 1 / (d + eps), normalized after the eps regularization, which
    keeps the map smooth through anchor-coincident queries. Neighbor selection
    happens on detached coordinates; distances are recomputed in the graph so
    gradients reach both encodings and anchor positions.
    """
    idx_np = knn_select(
        queries.detach().cpu().numpy(), anchor_pos.detach().cpu().numpy(), neighbor_count, method
    )
    idx = torch.as_tensor(idx_np, device=queries.device)
    neigh = anchor_pos[idx]  # (N, k, 3)
    d = torch.linalg.norm(queries[:, None, :] - neigh, dim=-1)
    w = 1.0 / (d + eps)
    w = w / w.sum(dim=1, keepdim=True)
    return (encodings[idx] * w[:, :, None]).sum(dim=1)


def _mlp(dims: Sequence[int], dtype) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1], dtype=dtype))
        if i < len(dims) - 2:
            layers.append(nn.SiLU())
    return nn.Sequential(*layers)


class MultiResolutionField(nn.Module):
    """Stack of anchor sets with per-level decoders and a fusion head."""

    def __init__(self, template: TemplateMesh, config: FieldConfig, seed: int, dtype=torch.float64):
        super().__init__()
        config.validate()
        self.config = config
        self.anchor_sets: list[AnchorSet] = []
        self.encodings = nn.ParameterList()
        for lvl, count in enumerate(config.anchor_counts):
            aset = sample_anchors(
                template, count, seed, encoding_dim=config.encoding_dim, level=lvl, dtype=dtype
            )
            enc = nn.Parameter(aset.encodings)
            aset.encodings = enc
            self.anchor_sets.append(aset)
            self.encodings.append(enc)
        in_dim = config.encoding_dim + config.condition_dim
        self.level_mlps = nn.ModuleList(
            _mlp(
                [in_dim] + [config.hidden_width] * (config.hidden_layers - 1) + [config.feature_dim],
                dtype,
            )
            for _ in range(config.levels)
        )
        self.fuse_mlp = _mlp(
            [config.feature_dim * config.levels]
            + [config.fusion_width] * (config.fusion_layers - 1)
            + [config.out_dim],
            dtype,
        )

    def queried_encodings(
        self, queries: torch.Tensor, posed: PosedMesh, method: str = "auto"
    ) -> list[torch.Tensor]:
        out = []
        for aset in self.anchor_sets:
            pos = anchor_positions(aset, posed)
            out.append(
                interpolate(queries, pos, aset.encodings, self.config.neighbor_count, method=method)
            )
        return out

    def eval_level(self, level: int, queried: torch.Tensor, condition: torch.Tensor) -> torch.Tensor:
        cond = condition.reshape(-1)
        if cond.numel() != self.config.condition_dim:
            raise ValueError(
                f"condition width {cond.numel()} does not match field's "
                f"{self.config.condition} width {self.config.condition_dim}"
            )
        x = torch.cat([queried, cond.unsqueeze(0).expand(queried.shape[0], -1)], dim=1)
        return self.level_mlps[level](x)

    def fuse(self, features: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(features) != self.config.levels:
            raise ValueError(f"expected {self.config.levels} feature tensors, got {len(features)}")
        return self.fuse_mlp(torch.cat(list(features), dim=1))

    def forward(
        self,
        queries: torch.Tensor,
        posed: PosedMesh,
        condition: torch.Tensor,
        queried: Optional[list[torch.Tensor]] = None,
        method: str = "auto",
    ) -> torch.Tensor:
        if queried is None:
            queried = self.queried_encodings(queries, posed, method=method)
        feats = [self.eval_level(k, q, condition) for k, q in enumerate(queried)]
        return torch.sigmoid(self.fuse(feats))


class OccupancyField(nn.Module):
    """Part-pair conditioned occupancy.

    Each query is expressed in the frames of its two nearest skeleton parts
    (local coordinates, segment distances, part identities) together with the
    distance to its nearest surface anchor, then decoded with the articulation
    vector. An analytic window on part distance forces exact zeros far from
    the skeleton, so far-field pruning is lossless.
    """

    def __init__(self, template: TemplateMesh, config: OccupancyConfig, seed: int, dtype=torch.float64):
        super().__init__()
        self.config = config
        self.num_parts = template.num_joints
        self.anchors = sample_anchors(template, config.anchor_count, seed, level=-1)
        in_dim = 9 + 2 * self.num_parts + config.pose_dim
        self.mlp = _mlp(
            [in_dim] + [config.hidden_width] * (config.hidden_layers - 1) + [1], dtype
        )
        # widest part radius sets the gating shells
        verts = template.vertices.detach().cpu().numpy()
        heads = template.rest_joints.detach().cpu().numpy()
        tails = template.bone_tails().detach().cpu().numpy()
        d = geometry.point_segment_distance(verts, heads, tails)
        radius = float(d.min(axis=1).max())
        self.gate_inner = radius * config.gate_inner_scale
        self.gate_outer = radius * config.gate_outer_scale

    def part_distances(self, queries: torch.Tensor, posed: PosedMesh) -> torch.Tensor:
        heads, tails = posed.bone_segments()
        d = tails - heads  # (B, 3)
        len2 = (d * d).sum(-1).clamp_min(1e-30)
        rel = queries[:, None, :] - heads[None]
        t = ((rel * d[None]).sum(-1) / len2[None]).clamp(0.0, 1.0)
        closest = heads[None] + t[..., None] * d[None]
        return torch.linalg.norm(queries[:, None, :] - closest, dim=-1)  # (N, B)

    def prune_mask(self, queries: torch.Tensor, posed: PosedMesh) -> torch.Tensor:
        """True where occupancy is analytically zero (safe to skip)."""
        with torch.no_grad():
            dmin = self.part_distances(queries, posed).min(dim=1).values
        return dmin >= self.gate_outer

    def forward(self, queries: torch.Tensor, posed: PosedMesh, finger_pose: torch.Tensor) -> torch.Tensor:
        n = queries.shape[0]
        if n == 0:
            return queries.new_zeros(0)
        pose = finger_pose.reshape(-1)
        if pose.numel() != self.config.pose_dim:
            raise ValueError(
                f"articulation width {pose.numel()} does not match occupancy width "
                f"{self.config.pose_dim} (global terms must be excluded)"
            )
        dists = self.part_distances(queries, posed)  # (N, B)
        idx2 = torch.topk(dists.detach(), 2, dim=1, largest=False).indices  # (N, 2)
        d_sel = dists.gather(1, idx2)
        rot = posed.joint_rotations_world[idx2]  # (N, 2, 3, 3)
        org = posed.joint_positions[idx2]  # (N, 2, 3)
        local = torch.einsum("npij,npj->npi", rot.transpose(-1, -2), queries[:, None, :] - org)
        onehot = torch.nn.functional.one_hot(idx2, self.num_parts).to(queries.dtype)
        apos = anchor_positions(self.anchors, posed)
        aidx = torch.as_tensor(
            knn_select(queries.detach().cpu().numpy(), apos.detach().cpu().numpy(), 1),
            device=queries.device,
        )
        d_surf = torch.linalg.norm(queries - apos[aidx[:, 0]], dim=-1)
        x = torch.cat(
            [
                local.reshape(n, 6),
                d_sel,
                d_surf[:, None],
                onehot.reshape(n, -1),
                pose.unsqueeze(0).expand(n, -1),
            ],
            dim=1,
        )
        raw = torch.sigmoid(self.mlp(x).squeeze(-1))
        gate = soft_window(d_sel.min(dim=1).values, self.gate_inner, self.gate_outer)
        return raw * gate


class PriorModel(nn.Module):
    """Stage-1 learnable state: fields, template refiner, and identity table."""

    def __init__(
        self,
        template: TemplateMesh,
        config: ModelConfig,
        num_identities: int,
        seed: int = 0,
        dtype=torch.float64,
    ):
        super().__init__()
        self.template = template
        self.config = config
        self.dtype_ = dtype
        pose_dim = 3 * (template.num_joints - 1)
        config.shadow.condition_dim = pose_dim
        config.occupancy.pose_dim = pose_dim
        self.albedo_field = MultiResolutionField(template, config.albedo, config.anchor_seed, dtype)
        self.shadow_field = MultiResolutionField(
            template, config.shadow, config.anchor_seed + 1, dtype
        )
        self.occupancy_field = OccupancyField(template, config.occupancy, config.anchor_seed + 2, dtype)
        self.refiner = TemplateRefiner(
            num_frequencies=config.encoding_frequencies,
            pose_dim=pose_dim,
            code_dim=config.identity_dim,
            hidden=config.refiner_hidden,
            layers=config.refiner_layers,
            dtype=dtype,
        )
        self.identity_codes = nn.Parameter(
            init_identity_codes(num_identities, config.identity_dim, config.identity_init_std, seed, dtype)
        )

    @property
    def num_identities(self) -> int:
        return int(self.identity_codes.shape[0])

    def albedo_at(
        self, queries: torch.Tensor, posed: PosedMesh, code: torch.Tensor, method: str = "auto"
    ) -> torch.Tensor:
        return self.albedo_field(queries, posed, code, method=method)

    def shadow_at(
        self, queries: torch.Tensor, posed: PosedMesh, finger_pose: torch.Tensor, method: str = "auto"
    ) -> torch.Tensor:
        return self.shadow_field(queries, posed, finger_pose, method=method)

    def occupancy_at(self, queries: torch.Tensor, posed: PosedMesh, finger_pose: torch.Tensor) -> torch.Tensor:
        return self.occupancy_field(queries, posed, finger_pose)

    def sample_fields(
        self, queries: torch.Tensor, posed: PosedMesh, finger_pose: torch.Tensor, code: torch.Tensor
    ) -> FieldSample:
        occ = self.occupancy_at(queries, posed, finger_pose)
        alb = self.albedo_at(queries, posed, code)
        shd = self.shadow_at(queries, posed, finger_pose)
        return FieldSample(occupancy=occ, albedo=alb, shadow=shd, shaded=shd * alb)


def occupancy_ground_truth(queries: np.ndarray, posed: PosedMesh, seed: int = 0) -> np.ndarray:
    """Binary inside labels from the ray-parity test (union over components)."""
    verts = posed.vertices.detach().cpu().numpy()
    return geometry.points_inside(np.asarray(queries, dtype=np.float64), verts, posed.faces, seed=seed)
