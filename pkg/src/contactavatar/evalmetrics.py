"""Geometry extraction and evaluation: marching cubes, Chamfer distance,
F-score, normal consistency, and interpenetration volume.

Conventions fixed by this artifact: distances are point-to-point between
area-weighted surface samples drawn with the caller's seed (the same seed
is used for both meshes), Chamfer distance is unsquared and reported in
millimeters, F-score and normal consistency are percentages.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import _mc_tables as mct
from .meshes import face_normals_areas, sample_surface

log = logging.getLogger(__name__)


@dataclass
class TriangleMesh:
    vertices: np.ndarray                    # (V, 3), meters
    faces: np.ndarray                       # (F, 3)
    normals: np.ndarray | None = None       # optional per-vertex normals
    boundary_contact: bool = False          # isosurface touched the grid bounds

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def euler_characteristic(self) -> int:
        edges = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]],
                                self.faces[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        n_edges = len(np.unique(edges, axis=0))
        return len(self.vertices) - n_edges + len(self.faces)


def _grid_points(bounds, resolution):
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    axes = [np.linspace(lo[k], hi[k], resolution + 1) for k in range(3)]
    return lo, hi, axes


def marching_cubes(field_fn, resolution: int, bounds,
                   chunk: int = 262144) -> TriangleMesh:
    """Extract the zero isosurface of a scalar field (positive inside).

    `field_fn` maps (N, 3) points to (N,) values. `resolution` counts cells
    per axis. Shared edge vertices give a watertight mesh with deterministic
    vertex order (sorted global edge ids).
    """
    if resolution < 16:
        raise ValueError("resolution must be >= 16")
    lo, hi, axes = _grid_points(bounds, resolution)
    n = resolution + 1
    gx, gy, gz = np.meshgrid(axes[0], axes[1], axes[2], indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    vals = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        vals[s:s + chunk] = field_fn(pts[s:s + chunk])
    vals = vals.reshape(n, n, n)

    below = vals < 0.0       # "outside" corners
    # cube index per cell from the 8 corner bits
    idx = np.zeros((resolution, resolution, resolution), dtype=np.int32)
    for bit, (ox, oy, oz) in enumerate(mct.CORNER_OFFSETS):
        idx |= (below[ox:ox + resolution, oy:oy + resolution,
                      oz:oz + resolution].astype(np.int32) << bit)

    active = (idx != 0) & (idx != 255)
    ci, cj, ck = np.nonzero(active)
    if len(ci) == 0:
        return TriangleMesh(vertices=np.zeros((0, 3)),
                            faces=np.zeros((0, 3), dtype=np.int64))
    touched = bool(np.any((ci == 0) | (cj == 0) | (ck == 0)
                          | (ci == resolution - 1) | (cj == resolution - 1)
                          | (ck == resolution - 1)))
    if touched:
        log.warning("marching_cubes: isosurface touches the grid bounds")
    cell_idx = idx[ci, cj, ck]

    # global edge ids: x-edges, then y-edges, then z-edges, each on its own
    # (n, n, n) lattice of edge origins
    stride = n * n * n

    def edge_gid(local_edge, i, j, k):
        c0, c1 = mct.EDGE_CORNERS[local_edge]
        o0 = np.array(mct.CORNER_OFFSETS[c0])
        o1 = np.array(mct.CORNER_OFFSETS[c1])
        axis = int(np.nonzero(o0 != o1)[0][0])
        org = np.minimum(o0, o1)
        ii, jj, kk = i + org[0], j + org[1], k + org[2]
        return axis * stride + (ii * n + jj) * n + kk

    tri_edges = []       # (T, 3) global edge ids, built per cube case
    order_keys = []      # cell order for deterministic face ordering
    for case in range(1, 255):
        pattern = mct.TRI_TABLE[case]
        if not pattern:
            continue
        sel = np.nonzero(cell_idx == case)[0]
        if len(sel) == 0:
            continue
        i, j, k = ci[sel], cj[sel], ck[sel]
        for t in range(0, len(pattern), 3):
            gids = np.stack([edge_gid(pattern[t + d], i, j, k)
                             for d in range(3)], axis=1)
            tri_edges.append(gids)
            # unique per (cell, triangle slot): cells carry a single case
            order_keys.append(((i.astype(np.int64) * n + j) * n + k) * 16 + t)
    tri_edges = np.concatenate(tri_edges)
    order = np.argsort(np.concatenate(order_keys), kind="stable")
    tri_edges = tri_edges[order]

    unique_edges, faces = np.unique(tri_edges, return_inverse=True)
    faces = faces.reshape(-1, 3).astype(np.int64)

    # interpolate one vertex per unique crossing edge
    axis = unique_edges // stride
    rem = unique_edges % stride
    ei = rem // (n * n)
    ej = (rem // n) % n
    ek = rem % n
    p0 = np.stack([axes[0][ei], axes[1][ej], axes[2][ek]], axis=1)
    step = (hi - lo) / resolution
    p1 = p0.copy()
    v0 = vals[ei, ej, ek]
    oi = ei.copy()
    oj = ej.copy()
    ok = ek.copy()
    for ax, sel in enumerate((axis == 0, axis == 1, axis == 2)):
        p1[sel, ax] += step[ax]
        if ax == 0:
            oi[sel] += 1
        elif ax == 1:
            oj[sel] += 1
        else:
            ok[sel] += 1
    v1 = vals[oi, oj, ok]
    denom = v1 - v0
    denom = np.where(np.abs(denom) > 1e-300, denom, 1.0)
    t = np.clip((0.0 - v0) / denom, 0.0, 1.0)
    verts = p0 + t[:, None] * (p1 - p0)
    return TriangleMesh(vertices=verts, faces=faces, boundary_contact=touched)


def _samples_with_normals(mesh: TriangleMesh, n: int, seed: int):
    rng = np.random.default_rng(seed)
    pts, _, normals = sample_surface(mesh.vertices, mesh.faces, n, rng)
    return pts, normals


def chamfer_distance(a: TriangleMesh, b: TriangleMesh, n_samples: int = 100_000,
                     seed: int = 0) -> float:
    """Symmetric mean nearest-point distance in millimeters. Both meshes are
    sampled with the same seed."""
    if a.is_empty or b.is_empty:
        raise ValueError("chamfer_distance requires non-empty meshes")
    pa, _ = _samples_with_normals(a, n_samples, seed)
    pb, _ = _samples_with_normals(b, n_samples, seed)
    d_ab, _ = cKDTree(pb).query(pa, workers=-1)
    d_ba, _ = cKDTree(pa).query(pb, workers=-1)
    return 1000.0 * 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def f_score(a: TriangleMesh, b: TriangleMesh, tau_mm: float,
            n_samples: int = 100_000, seed: int = 0) -> float:
    """F-score (percent) at threshold tau (millimeters)."""
    if a.is_empty or b.is_empty:
        raise ValueError("f_score requires non-empty meshes")
    tau = tau_mm / 1000.0
    pa, _ = _samples_with_normals(a, n_samples, seed)
    pb, _ = _samples_with_normals(b, n_samples, seed)
    d_ab, _ = cKDTree(pb).query(pa, workers=-1)
    d_ba, _ = cKDTree(pa).query(pb, workers=-1)
    precision = float((d_ab <= tau).mean())
    recall = float((d_ba <= tau).mean())
    if precision + recall == 0.0:
        return 0.0
    return 100.0 * 2.0 * precision * recall / (precision + recall)


def normal_consistency(a: TriangleMesh, b: TriangleMesh,
                       n_samples: int = 100_000, seed: int = 0) -> float:
    """Mean |cos| between sample normals and their nearest neighbor's normal,
    averaged over both directions, as a percentage."""
    if a.is_empty or b.is_empty:
        raise ValueError("normal_consistency requires non-empty meshes")
    pa, na = _samples_with_normals(a, n_samples, seed)
    pb, nb = _samples_with_normals(b, n_samples, seed)
    _, i_ab = cKDTree(pb).query(pa, workers=-1)
    _, i_ba = cKDTree(pa).query(pb, workers=-1)
    cos_ab = np.abs(np.einsum("pk,pk->p", na, nb[i_ab]))
    cos_ba = np.abs(np.einsum("pk,pk->p", nb, na[i_ba]))
    return 100.0 * 0.5 * (float(cos_ab.mean()) + float(cos_ba.mean()))


def interpenetration_volume(face_field_fn, hand_occupancy_fn, bounds,
                            resolution: int = 128, chunk: int = 262144) -> float:
    """Volume (mm^3) of the region inside both the face field (s > 0) and the
    hand (occupancy > 0.5), integrated over cell centers."""
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    step = (hi - lo) / resolution
    centers = [lo[k] + step[k] * (np.arange(resolution) + 0.5) for k in range(3)]
    gx, gy, gz = np.meshgrid(*centers, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    count = 0
    for s in range(0, len(pts), chunk):
        block = pts[s:s + chunk]
        inside_face = face_field_fn(block) > 0.0
        if not np.any(inside_face):
            continue
        occ = np.zeros(len(block))
        occ[inside_face] = hand_occupancy_fn(block[inside_face])
        count += int(np.count_nonzero(inside_face & (occ > 0.5)))
    cell_vol = float(np.prod(step))
    return count * cell_vol * 1e9


# ---------------------------------------------------------------------------
# mesh export


def save_obj(path, mesh: TriangleMesh) -> None:
    with open(path, "w") as f:
        f.write("# contactavatar mesh export\n")
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9f} {v[1]:.9f} {v[2]:.9f}\n")
        for tri in mesh.faces:
            f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")


def save_stl(path, mesh: TriangleMesh) -> None:
    """Binary STL."""
    normals, _ = face_normals_areas(mesh.vertices, mesh.faces)
    with open(path, "wb") as f:
        f.write(b"contactavatar binary stl".ljust(80, b"\0"))
        f.write(struct.pack("<I", len(mesh.faces)))
        for tri, n in zip(mesh.faces, normals):
            f.write(struct.pack("<3f", *n.astype(np.float32)))
            for vid in tri:
                f.write(struct.pack("<3f", *mesh.vertices[vid].astype(np.float32)))
            f.write(struct.pack("<H", 0))


def load_obj(path) -> TriangleMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        if line.startswith("v "):
            verts.append([float(x) for x in line.split()[1:4]])
        elif line.startswith("f "):
            faces.append([int(tok.split("/")[0]) - 1 for tok in line.split()[1:4]])
    return TriangleMesh(vertices=np.array(verts, dtype=np.float64),
                        faces=np.array(faces, dtype=np.int64))
