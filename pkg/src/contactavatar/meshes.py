"""Triangle-mesh utilities shared across the pipeline.

All positions are meters, float64. Meshes are (V, 3) vertex arrays plus
(F, 3) integer index arrays.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

# fixed, slightly irrational ray direction for parity tests: keeps rays off
# mesh edges/vertices in generic position
_PARITY_DIR = np.array([0.57735027, 0.21132487, 0.78867513])
_PARITY_DIR = _PARITY_DIR / np.linalg.norm(_PARITY_DIR)


def face_normals_areas(verts: np.ndarray, faces: np.ndarray):
    """Unit face normals and triangle areas; degenerate faces get zero area
    and an arbitrary unit normal."""
    a = verts[faces[:, 0]]
    b = verts[faces[:, 1]]
    c = verts[faces[:, 2]]
    cross = np.cross(b - a, c - a)
    norm = np.linalg.norm(cross, axis=1)
    areas = 0.5 * norm
    safe = np.where(norm > 1e-300, norm, 1.0)
    normals = cross / safe[:, None]
    normals[norm <= 1e-300] = np.array([0.0, 0.0, 1.0])
    return normals, areas


def vertex_normals(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals, unit length."""
    fn, areas = face_normals_areas(verts, faces)
    vn = np.zeros_like(verts)
    weighted = fn * areas[:, None]
    for k in range(3):
        np.add.at(vn, faces[:, k], weighted)
    norm = np.linalg.norm(vn, axis=1)
    norm = np.where(norm > 1e-300, norm, 1.0)
    return vn / norm[:, None]


def sample_surface(verts: np.ndarray, faces: np.ndarray, n: int,
                   rng: np.random.Generator):
    """Area-weighted surface samples; returns (points, face ids, normals)."""
    _, areas = face_normals_areas(verts, faces)
    total = areas.sum()
    if total <= 0.0:
        raise ValueError("mesh has zero total area")
    probs = areas / total
    fid = rng.choice(len(faces), size=n, p=probs)
    r1 = rng.random(n)
    r2 = rng.random(n)
    # uniform barycentric via square-root trick
    su = np.sqrt(r1)
    b0 = 1.0 - su
    b1 = su * (1.0 - r2)
    b2 = su * r2
    tri = verts[faces[fid]]
    pts = b0[:, None] * tri[:, 0] + b1[:, None] * tri[:, 1] + b2[:, None] * tri[:, 2]
    fn, _ = face_normals_areas(verts, faces)
    return pts, fid, fn[fid]


def ray_triangle_intersect(origins: np.ndarray, dirs: np.ndarray,
                           verts: np.ndarray, faces: np.ndarray,
                           t_min: float = 1e-9, t_max: float = np.inf):
    """Batched Moller-Trumbore: nearest hit per ray.

    Returns (t, face id, barycentric (b0, b1, b2)); misses get t = inf and
    face id -1. Memory is O(rays * faces); chunk at call sites if needed.
    """
    n_rays = origins.shape[0]
    v0 = verts[faces[:, 0]]
    e1 = verts[faces[:, 1]] - v0
    e2 = verts[faces[:, 2]] - v0

    d = dirs[:, None, :]
    pvec = np.cross(d, e2[None, :, :])
    det = np.einsum("fk,rfk->rf", e1, pvec)
    near_zero = np.abs(det) < 1e-14
    inv_det = 1.0 / np.where(near_zero, 1.0, det)
    tvec = origins[:, None, :] - v0[None, :, :]
    u = np.einsum("rfk,rfk->rf", tvec, pvec) * inv_det
    qvec = np.cross(tvec, e1[None, :, :])
    v = np.einsum("rfk,rfk->rf", dirs[:, None, :], qvec) * inv_det
    t = np.einsum("fk,rfk->rf", e2, qvec) * inv_det

    valid = (~near_zero) & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0)
    valid &= (t > t_min) & (t < t_max)
    t = np.where(valid, t, np.inf)
    best = np.argmin(t, axis=1)
    rows = np.arange(n_rays)
    t_best = t[rows, best]
    fid = np.where(np.isfinite(t_best), best, -1)
    u_best = u[rows, best]
    v_best = v[rows, best]
    bary = np.stack([1.0 - u_best - v_best, u_best, v_best], axis=1)
    bary[fid < 0] = 0.0
    return t_best, fid, bary


def _closest_point_on_triangles(points: np.ndarray, tri: np.ndarray):
    """Closest point on each (point, triangle) pair.

    points: (N, 3); tri: (N, K, 3, 3). Returns (N, K, 3) closest points.
    Ericson's real-time collision detection region test, vectorized.
    """
    a = tri[..., 0, :]
    b = tri[..., 1, :]
    c = tri[..., 2, :]
    p = points[:, None, :]

    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("...k,...k->...", ab, ap)
    d2 = np.einsum("...k,...k->...", ac, ap)

    bp = p - b
    d3 = np.einsum("...k,...k->...", ab, bp)
    d4 = np.einsum("...k,...k->...", ac, bp)

    cp = p - c
    d5 = np.einsum("...k,...k->...", ab, cp)
    d6 = np.einsum("...k,...k->...", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    denom_ab = d1 - d3
    denom_ab = np.where(np.abs(denom_ab) > 1e-300, denom_ab, 1.0)
    v_ab = np.clip(d1 / denom_ab, 0.0, 1.0)

    denom_ac = d2 - d6
    denom_ac = np.where(np.abs(denom_ac) > 1e-300, denom_ac, 1.0)
    w_ac = np.clip(d2 / denom_ac, 0.0, 1.0)

    denom_bc = (d4 - d3) + (d5 - d6)
    denom_bc = np.where(np.abs(denom_bc) > 1e-300, denom_bc, 1.0)
    w_bc = np.clip((d4 - d3) / denom_bc, 0.0, 1.0)

    denom_face = va + vb + vc
    denom_face = np.where(np.abs(denom_face) > 1e-300, denom_face, 1.0)
    v_face = vb / denom_face
    w_face = vc / denom_face

    res = a + v_face[..., None] * ab + w_face[..., None] * ac
    # edge BC region
    mask = (va <= 0.0) & (d4 - d3 >= 0.0) & (d5 - d6 >= 0.0)
    res = np.where(mask[..., None], b + w_bc[..., None] * (c - b), res)
    # edge AC region
    mask = (vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0)
    res = np.where(mask[..., None], a + w_ac[..., None] * ac, res)
    # edge AB region
    mask = (vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0)
    res = np.where(mask[..., None], a + v_ab[..., None] * ab, res)
    # vertex regions
    mask = (d1 <= 0.0) & (d2 <= 0.0)
    res = np.where(mask[..., None], a, res)
    mask = (d3 >= 0.0) & (d4 <= 0.0)
    res = np.where(mask[..., None], b, res)
    mask = (d6 >= 0.0) & (d5 <= 0.0)
    res = np.where(mask[..., None], c, res)
    return res


class MeshDistanceField:
    """Signed distance + nearest-triangle queries against a fixed mesh.

    Magnitude comes from the nearest of the k triangles whose centroids are
    closest (exact point-triangle distance); sign from a parity ray test
    along a fixed generic direction.
    """

    def __init__(self, verts: np.ndarray, faces: np.ndarray, k_nearest: int = 12):
        self.verts = np.asarray(verts, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int64)
        self.k = min(k_nearest, len(self.faces))
        centroids = self.verts[self.faces].mean(axis=1)
        self._tree = cKDTree(centroids)
        self._vnormals = vertex_normals(self.verts, self.faces)
        lo = self.verts.min(axis=0)
        hi = self.verts.max(axis=0)
        self.bounds = (lo, hi)

    def nearest(self, points: np.ndarray):
        """Closest surface point, its face id, and barycentric coords."""
        points = np.atleast_2d(points)
        _, idx = self._tree.query(points, k=self.k, workers=-1)
        if self.k == 1:
            idx = idx[:, None]
        tri = self.verts[self.faces[idx]]
        closest = _closest_point_on_triangles(points, tri)
        d2 = ((closest - points[:, None, :]) ** 2).sum(axis=2)
        best = np.argmin(d2, axis=1)
        rows = np.arange(len(points))
        cp = closest[rows, best]
        fid = idx[rows, best]
        tri_best = self.verts[self.faces[fid]]
        bary = _barycentric(cp, tri_best)
        return cp, fid, bary

    def contains(self, points: np.ndarray, chunk: int = 4096) -> np.ndarray:
        """Parity ray test: odd crossing count means inside."""
        points = np.atleast_2d(points)
        out = np.zeros(len(points), dtype=bool)
        dirs = np.broadcast_to(_PARITY_DIR, (1, 3))
        v0 = self.verts[self.faces[:, 0]]
        e1 = self.verts[self.faces[:, 1]] - v0
        e2 = self.verts[self.faces[:, 2]] - v0
        pvec = np.cross(dirs[0], e2)
        det = np.einsum("fk,fk->f", e1, pvec)
        near_zero = np.abs(det) < 1e-14
        inv_det = 1.0 / np.where(near_zero, 1.0, det)
        for s in range(0, len(points), chunk):
            pts = points[s:s + chunk]
            tvec = pts[:, None, :] - v0[None, :, :]
            u = np.einsum("rfk,fk->rf", tvec, pvec) * inv_det
            qvec = np.cross(tvec, e1[None, :, :])
            v = np.einsum("rfk,k->rf", qvec, _PARITY_DIR) * inv_det
            t = np.einsum("rfk,fk->rf", qvec, e2) * inv_det
            hit = (~near_zero) & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 0.0)
            out[s:s + chunk] = (hit.sum(axis=1) % 2) == 1
        return out

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        """Negative inside, positive outside."""
        points = np.atleast_2d(points)
        cp, _, _ = self.nearest(points)
        dist = np.linalg.norm(points - cp, axis=1)
        inside = self.contains(points)
        return np.where(inside, -dist, dist)

    def interpolated_normal(self, points: np.ndarray) -> np.ndarray:
        """Vertex normals of the nearest face blended barycentrically."""
        points = np.atleast_2d(points)
        _, fid, bary = self.nearest(points)
        vids = self.faces[fid]
        n = np.einsum("pk,pkj->pj", bary, self._vnormals[vids])
        norm = np.linalg.norm(n, axis=1)
        norm = np.where(norm > 1e-300, norm, 1.0)
        return n / norm[:, None]


def _barycentric(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of points lying on (or near) triangles."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    v0 = b - a
    v1 = c - a
    v2 = points - a
    d00 = np.einsum("pk,pk->p", v0, v0)
    d01 = np.einsum("pk,pk->p", v0, v1)
    d11 = np.einsum("pk,pk->p", v1, v1)
    d20 = np.einsum("pk,pk->p", v2, v0)
    d21 = np.einsum("pk,pk->p", v2, v1)
    denom = d00 * d11 - d01 * d01
    denom = np.where(np.abs(denom) > 1e-300, denom, 1.0)
    v = (d11 * d20 - d01 * d21) / denom
    w = (d00 * d21 - d01 * d20) / denom
    u = 1.0 - v - w
    return np.stack([u, v, w], axis=1)


def aabb_overlap(lo_a, hi_a, lo_b, hi_b):
    """Intersection box of two AABBs, or None if disjoint."""
    lo = np.maximum(lo_a, lo_b)
    hi = np.minimum(hi_a, hi_b)
    if np.any(lo >= hi):
        return None
    return lo, hi
