"""Computational-geometry predicates shared by ground-truth generation and tests.

Everything here is plain numpy on explicit triangle soups; the differentiable
field code never depends on it, so these routines double as independent
oracles. Ray queries prune work per connected component via bounding spheres.
"""

from __future__ import annotations

import numpy as np

from .utils import rng_from_seed

_EDGE_TOL = 1e-9


class NonWatertightMeshError(ValueError):
    pass


def face_components(num_vertices: int, faces: np.ndarray) -> np.ndarray:
    """Label faces by vertex-connected component (union-find)."""
    parent = np.arange(num_vertices)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for f in faces:
        r = find(f[0])
        for v in f[1:]:
            parent[find(v)] = r
    roots = np.array([find(f[0]) for f in faces])
    _, labels = np.unique(roots, return_inverse=True)
    return labels


def check_watertight(faces: np.ndarray) -> None:
    """Every undirected edge must appear in exactly two faces."""
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    if (counts != 2).any():
        bad = int((counts != 2).sum())
        raise NonWatertightMeshError(f"{bad} edges are not shared by exactly 2 faces")


def component_spheres(
    vertices: np.ndarray, faces: np.ndarray, labels: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Bounding sphere (centroid-based) per face component."""
    n_comp = labels.max() + 1
    centers = np.zeros((n_comp, 3))
    radii = np.zeros(n_comp)
    for comp in range(n_comp):
        vids = np.unique(faces[labels == comp])
        pts = vertices[vids]
        c = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
        centers[comp] = c
        radii[comp] = np.linalg.norm(pts - c, axis=1).max()
    return centers, radii


def _rays_hit_sphere(
    origins: np.ndarray, directions: np.ndarray, center: np.ndarray, radius: float
) -> np.ndarray:
    oc = center[None] - origins
    mid = (oc * directions).sum(-1)
    par2 = (oc * oc).sum(-1) - mid * mid
    disc = radius * radius - par2
    hit = disc >= 0
    t_far = mid + np.sqrt(np.where(hit, disc, 0.0))
    return hit & (t_far > 0)


def _moller_trumbore(origins, directions, triangles, eps=1e-12):
    """Hit mask plus (t, u, v) for all (ray, triangle) pairs in one block."""
    v0 = triangles[:, 0]
    e1 = triangles[:, 1] - v0
    e2 = triangles[:, 2] - v0
    d = directions[:, None, :]
    p = np.cross(d, e2[None])
    det = (e1[None] * p).sum(-1)
    ok = np.abs(det) >= eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = origins[:, None, :] - v0[None]
    u = (s * p).sum(-1) * inv
    q = np.cross(s, e1[None])
    v = (d * q).sum(-1) * inv
    t = (e2[None] * q).sum(-1) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > eps)
    return hit, t, u, v


def _chunk_rows(n_tris: int, budget: int = 1_500_000) -> int:
    return max(1, budget // max(n_tris, 1))


def ray_mesh_nearest(
    origins: np.ndarray,
    directions: np.ndarray,
    vertices: np.ndarray,
    faces: np.ndarray,
    labels: np.ndarray | None = None,
):
    """Nearest ray-mesh intersection, component-sphere pruned.

    Returns (t, face_index, barycentric) with t = inf and face_index = -1 for
    misses. Face indices refer to the full face array.
    """
    if labels is None:
        labels = face_components(vertices.max() + 1 if faces.size else 0, faces) if len(faces) else np.zeros(0, dtype=int)
    centers, radii = component_spheres(vertices, faces, labels)
    tris = vertices[faces]
    n = len(origins)
    best_t = np.full(n, np.inf)
    best_face = np.full(n, -1, dtype=np.int64)
    best_uv = np.zeros((n, 2))
    for comp in range(labels.max() + 1):
        cand = np.nonzero(_rays_hit_sphere(origins, directions, centers[comp], radii[comp]))[0]
        if len(cand) == 0:
            continue
        face_ids = np.nonzero(labels == comp)[0]
        comp_tris = tris[face_ids]
        rows = _chunk_rows(len(face_ids))
        for s in range(0, len(cand), rows):
            sel = cand[s : s + rows]
            hit, t, u, v = _moller_trumbore(origins[sel], directions[sel], comp_tris)
            t_hit = np.where(hit, t, np.inf)
            arg = t_hit.argmin(axis=1)
            rr = np.arange(len(sel))
            tmin = t_hit[rr, arg]
            better = tmin < best_t[sel]
            upd = sel[better]
            best_t[upd] = tmin[better]
            best_face[upd] = face_ids[arg[better]]
            best_uv[upd, 0] = u[rr[better], arg[better]]
            best_uv[upd, 1] = v[rr[better], arg[better]]
    bary = np.stack(
        [1.0 - best_uv[:, 0] - best_uv[:, 1], best_uv[:, 0], best_uv[:, 1]], axis=1
    )
    return best_t, best_face, bary


def points_inside(
    points: np.ndarray,
    vertices: np.ndarray,
    faces: np.ndarray,
    seed: int = 0,
    max_retries: int = 8,
) -> np.ndarray:
    """Ray-parity inside test with union semantics over connected components.

    A point counts as inside when its crossing parity is odd for any single
    component, so overlapping closed parts behave like their solid union.
    Degenerate edge-grazing hits are retried with jittered ray directions.
    """
    check_watertight(faces)
    labels = face_components(len(vertices), faces)
    centers, radii = component_spheres(vertices, faces, labels)
    tris = vertices[faces]
    n = len(points)
    inside = np.zeros(n, dtype=bool)
    unresolved = np.arange(n)
    rng = rng_from_seed(seed, "parity")
    direction = np.array([0.5773502691896258, 0.5773502691896258, 0.5773502691896258])
    result = np.zeros(0, dtype=bool)
    bad = np.zeros(0, dtype=bool)
    for _ in range(max_retries):
        if len(unresolved) == 0:
            break
        pts = points[unresolved]
        dirs = np.broadcast_to(direction, (len(pts), 3))
        result = np.zeros(len(pts), dtype=bool)
        bad = np.zeros(len(pts), dtype=bool)
        for comp in range(labels.max() + 1):
            cand = np.nonzero(_rays_hit_sphere(pts, dirs, centers[comp], radii[comp]))[0]
            if len(cand) == 0:
                continue
            comp_tris = tris[labels == comp]
            rows = _chunk_rows(len(comp_tris))
            for s in range(0, len(cand), rows):
                sel = cand[s : s + rows]
                hit, t, u, v = _moller_trumbore(pts[sel], dirs[sel], comp_tris)
                near_edge = hit & (
                    (u < _EDGE_TOL) | (v < _EDGE_TOL) | (u + v > 1 - _EDGE_TOL) | (t < _EDGE_TOL)
                )
                result[sel] |= (hit.sum(axis=1) % 2) == 1
                bad[sel] |= near_edge.any(axis=1)
        inside[unresolved[~bad]] = result[~bad]
        unresolved = unresolved[bad]
        v = rng.normal(size=3)
        direction = v / np.linalg.norm(v)
    if len(unresolved):
        # every retry direction grazed an edge; accept the last parity
        inside[unresolved] = result[bad]
    return inside


def winding_numbers(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Generalized winding number per component, reduced by max.

    Independent of the parity test; used as a cross-check oracle. Returns the
    maximum solid-angle winding over components, ~1 inside and ~0 outside.
    """
    labels = face_components(len(vertices), faces)
    tris = vertices[faces]
    out = np.full(len(points), -np.inf)
    for comp in range(labels.max() + 1):
        t = tris[labels == comp]
        w = np.zeros(len(points))
        chunk = _chunk_rows(len(t), 4_000_000)
        for s in range(0, len(points), chunk):
            p = points[s : s + chunk][:, None, :]
            a = t[None, :, 0] - p
            b = t[None, :, 1] - p
            c = t[None, :, 2] - p
            la = np.linalg.norm(a, axis=-1)
            lb = np.linalg.norm(b, axis=-1)
            lc = np.linalg.norm(c, axis=-1)
            num = (a * np.cross(b, c)).sum(-1)
            den = (
                la * lb * lc
                + (a * b).sum(-1) * lc
                + (b * c).sum(-1) * la
                + (c * a).sum(-1) * lb
            )
            w[s : s + chunk] = 2.0 * np.arctan2(num, den).sum(axis=1)
        out = np.maximum(out, w / (4.0 * np.pi))
    return out


def point_segment_distance(points: np.ndarray, seg_a: np.ndarray, seg_b: np.ndarray) -> np.ndarray:
    """Distance from each point to each segment: (N, S) matrix."""
    d = seg_b - seg_a  # (S, 3)
    len2 = (d * d).sum(-1)
    rel = points[:, None, :] - seg_a[None]  # (N, S, 3)
    t = np.clip((rel * d[None]).sum(-1) / np.maximum(len2[None], 1e-30), 0.0, 1.0)
    closest = seg_a[None] + t[..., None] * d[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)


def rasterize_silhouette(
    vertices: np.ndarray,
    faces: np.ndarray,
    intrinsics: tuple[float, float, float, float],
    extrinsic: np.ndarray,
    width: int,
    height: int,
) -> np.ndarray:
    """Binary coverage mask from projected triangles (pixel-center-in-triangle).

    A rasterization-style alternative to ray casting, so masks produced here
    and hit maps from ray casting can validate one another.
    """
    fx, fy, cx, cy = intrinsics
    cam = vertices @ extrinsic[:3, :3].T + extrinsic[:3, 3]
    z = cam[:, 2]
    valid = z > 1e-9
    px = np.where(valid, fx * cam[:, 0] / np.where(valid, z, 1.0) + cx, 0.0)
    py = np.where(valid, fy * cam[:, 1] / np.where(valid, z, 1.0) + cy, 0.0)
    mask = np.zeros((height, width), dtype=bool)
    for f in faces:
        if not valid[f].all():
            continue
        xs, ys = px[f], py[f]
        x0 = max(int(np.floor(xs.min())), 0)
        x1 = min(int(np.ceil(xs.max())), width - 1)
        y0 = max(int(np.floor(ys.min())), 0)
        y1 = min(int(np.ceil(ys.max())), height - 1)
        if x1 < x0 or y1 < y0:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        d = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0])
        if abs(d) < 1e-12:
            continue
        w0 = ((xs[1] - gx) * (ys[2] - gy) - (xs[2] - gx) * (ys[1] - gy)) / d
        w1 = ((xs[2] - gx) * (ys[0] - gy) - (xs[0] - gx) * (ys[2] - gy)) / d
        w2 = 1.0 - w0 - w1
        cover = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        mask[gy[cover], gx[cover]] = True
    return mask
