"""PCA basis over hand-induced per-vertex displacement fields.

Rows of the displacement matrix are flattened (x, y, z per vertex)
canonical-space displacements, one row per frame. The basis supplies the
supervision targets for the non-rigid blendshape field and the subspace
for the per-frame contact parameters.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_tensors, save_tensors

DISPLACEMENT_FILE_VERSION = 1


class PriorError(ValueError):
    pass


@dataclass
class DisplacementMatrix:
    rows: np.ndarray          # (F, 3V)
    n_verts: int

    @property
    def n_frames(self) -> int:
        return self.rows.shape[0]

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[1] != 3 * self.n_verts:
            raise PriorError("row width must be 3 * vertex count")
        if not np.all(np.isfinite(self.rows)):
            raise PriorError("non-finite displacement entries")


@dataclass
class DeformationBasis:
    mean: np.ndarray            # (3V,)
    components: np.ndarray      # (n_k, 3V), orthonormal rows
    singular_values: np.ndarray  # (n_k,), non-increasing

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    @property
    def n_verts(self) -> int:
        return self.components.shape[1] // 3

    def validate(self) -> None:
        gram = self.components @ self.components.T
        if np.max(np.abs(gram - np.eye(self.n_components))) > 1e-8:
            raise PriorError("basis rows are not orthonormal")
        sv = self.singular_values
        if np.any(sv < -1e-12) or np.any(np.diff(sv) > 1e-12):
            raise PriorError("singular values must be non-negative, descending")

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.mean, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.components, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.singular_values, dtype="<f8").tobytes())
        return h.hexdigest()


def build_displacement_matrix(displacements, contact_any=None,
                              exclude_no_contact: bool = False
                              ) -> DisplacementMatrix:
    """Stack per-frame (V, 3) displacement fields into row order.

    `contact_any`: optional per-frame bool; with `exclude_no_contact`,
    frames without contact are dropped.
    """
    rows = []
    n_verts = None
    for i, d in enumerate(displacements):
        d = np.asarray(d, dtype=np.float64)
        if d.ndim != 2 or d.shape[1] != 3:
            raise PriorError("each displacement field must be (V, 3)")
        if n_verts is None:
            n_verts = d.shape[0]
        elif d.shape[0] != n_verts:
            raise PriorError("inconsistent vertex count across frames")
        if exclude_no_contact and contact_any is not None and not contact_any[i]:
            continue
        rows.append(d.reshape(-1))
    if not rows:
        raise PriorError("empty matrix: no frames left after filtering")
    return DisplacementMatrix(rows=np.stack(rows), n_verts=n_verts)


def pca_decompose(matrix: DisplacementMatrix, n_k: int,
                  center: bool = True) -> DeformationBasis:
    """Thin SVD of the (optionally mean-centered) displacement matrix.

    Sign convention: each component's largest-magnitude entry is positive,
    which makes the decomposition reproducible bit-for-bit.
    """
    f, d = matrix.rows.shape
    if n_k < 1 or n_k > min(f, d):
        raise PriorError(f"n_k={n_k} out of range for a {f}x{d} matrix")
    mean = matrix.rows.mean(axis=0) if center else np.zeros(d)
    centered = matrix.rows - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:n_k].copy()
    sv = s[:n_k].copy()
    for i in range(n_k):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return DeformationBasis(mean=mean, components=comps, singular_values=sv)


def project(basis: DeformationBasis, row: np.ndarray) -> np.ndarray:
    row = np.asarray(row, dtype=np.float64)
    if row.shape[-1] != basis.components.shape[1]:
        raise PriorError("row width does not match basis")
    return (row - basis.mean) @ basis.components.T


def reconstruct(basis: DeformationBasis, coeffs: np.ndarray) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[-1] != basis.n_components:
        raise PriorError("coefficient count does not match basis")
    return basis.mean + coeffs @ basis.components


def sample_basis_at_vertices(basis: DeformationBasis, vertex_ids) -> np.ndarray:
    """Per-vertex blendshape targets: (len(ids), n_k, 3)."""
    ids = np.asarray(vertex_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= basis.n_verts):
        raise PriorError("vertex id out of range")
    per_vertex = basis.components.reshape(basis.n_components, basis.n_verts, 3)
    return np.transpose(per_vertex[:, ids, :], (1, 0, 2))


# ---------------------------------------------------------------------------
# io


def save_displacements(prefix, matrix: DisplacementMatrix) -> None:
    """`<prefix>.json` header + `<prefix>.bin` row-major float64 blob."""
    prefix = Path(prefix)
    blob = prefix.with_suffix(".bin")
    header = {
        "version": DISPLACEMENT_FILE_VERSION,
        "vertex_count": matrix.n_verts,
        "frame_count": matrix.n_frames,
        "order": "frame-major rows; x,y,z per vertex",
        "dtype": "<f8",
        "blob": blob.name,
    }
    prefix.with_suffix(".json").write_text(json.dumps(header, sort_keys=True))
    blob.write_bytes(np.ascontiguousarray(matrix.rows, dtype="<f8").tobytes())


def load_displacements(prefix) -> DisplacementMatrix:
    prefix = Path(prefix)
    header = json.loads(prefix.with_suffix(".json").read_text())
    if header.get("version") != DISPLACEMENT_FILE_VERSION:
        raise PriorError("unsupported displacement file version")
    v, f = header["vertex_count"], header["frame_count"]
    raw = (prefix.parent / header["blob"]).read_bytes()
    rows = np.frombuffer(raw, dtype="<f8").reshape(f, 3 * v).copy()
    return DisplacementMatrix(rows=rows, n_verts=v)


def save_basis(path, basis: DeformationBasis) -> None:
    save_tensors(path, {
        "mean": basis.mean,
        "components": basis.components,
        "singular_values": basis.singular_values,
    }, meta={"kind": "deformation_basis", "hash": basis.content_hash()})


def load_basis(path) -> DeformationBasis:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "deformation_basis":
        raise PriorError(f"{path} is not a deformation basis checkpoint")
    basis = DeformationBasis(mean=tensors["mean"],
                             components=tensors["components"],
                             singular_values=tensors["singular_values"])
    basis.validate()
    if meta.get("hash") != basis.content_hash():
        raise PriorError("basis content hash mismatch")
    return basis
