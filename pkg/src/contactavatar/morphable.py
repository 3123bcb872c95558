"""Toy parametric face and hand models.

Same mathematical structure as the standard head/hand 3DMMs: template mesh,
expression blendshapes, pose-corrective basis keyed on (rotation - identity)
elements, a joint hierarchy with a vertex-based joint regressor, linear
blend skinning, and landmark embeddings. Geometry is procedural and seeded;
no licensed assets are involved.

Units are meters. The face looks along -z in its local frame.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .meshes import vertex_normals

MODEL_FILE_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass
class MorphableModel:
    template: np.ndarray        # (V, 3) rest positions
    faces: np.ndarray           # (F, 3) triangle indices
    expr_basis: np.ndarray      # (n_e, V, 3)
    pose_basis: np.ndarray      # (n_j, 9, V, 3)
    weights: np.ndarray         # (V, n_j), rows sum to 1
    joint_regressor: np.ndarray  # (n_j, V)
    parents: np.ndarray         # (n_j,), parents[0] == -1
    landmarks: np.ndarray       # vertex ids
    fingertips: np.ndarray      # vertex ids (hand) or empty
    contact_verts: np.ndarray   # vertex ids (face) or empty
    kind: str = "generic"

    @property
    def n_verts(self) -> int:
        return len(self.template)

    @property
    def n_expr(self) -> int:
        return self.expr_basis.shape[0]

    @property
    def n_joints(self) -> int:
        return self.weights.shape[1]

    def validate(self) -> None:
        v, j = self.n_verts, self.n_joints
        if self.weights.shape != (v, j):
            raise ModelError("weights shape mismatch")
        if np.any(self.weights < -1e-12):
            raise ModelError("negative skinning weight")
        if np.max(np.abs(self.weights.sum(axis=1) - 1.0)) > 1e-9:
            raise ModelError("skinning weight rows must sum to 1")
        if self.parents[0] != -1 or np.any(self.parents[1:] >= np.arange(1, j)):
            raise ModelError("joint hierarchy must be a tree rooted at joint 0")
        for ids in (self.faces.ravel(), self.landmarks, self.fingertips,
                    self.contact_verts):
            if len(ids) and (ids.min() < 0 or ids.max() >= v):
                raise ModelError("vertex index out of range")


@dataclass
class PoseParams:
    theta: np.ndarray           # (3 * n_j,) axis-angle per joint
    global_rot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    global_trans: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.global_rot = np.asarray(self.global_rot, dtype=np.float64)
        self.global_trans = np.asarray(self.global_trans, dtype=np.float64)
        if self.scale <= 0.0:
            raise ModelError("scale must be positive")

    @staticmethod
    def identity(n_joints: int) -> "PoseParams":
        return PoseParams(theta=np.zeros(3 * n_joints))


@dataclass
class ExpressionParams:
    psi: np.ndarray             # (n_e,)

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=np.float64)
        if not np.all(np.isfinite(self.psi)):
            raise ModelError("expression parameters must be finite")

    @staticmethod
    def zeros(n_expr: int) -> "ExpressionParams":
        return ExpressionParams(psi=np.zeros(n_expr))


@dataclass
class PointBlendAttributes:
    """Per-point expression vectors, pose correctives, and skin weights."""

    E: np.ndarray               # (n_e, 3)
    P: np.ndarray               # (n_j, 9, 3)
    W: np.ndarray               # (n_j,)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if np.any(self.W < -1e-12):
            raise ModelError("negative blend weight")
        s = self.W.sum()
        if abs(s - 1.0) > 1e-6:
            raise ModelError("blend weights must sum to 1")


# ---------------------------------------------------------------------------
# kinematics


def rodrigues(aa: np.ndarray) -> np.ndarray:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3)."""
    aa = np.asarray(aa, dtype=np.float64)
    theta2 = (aa * aa).sum(axis=-1)
    theta = np.sqrt(theta2 + 1e-40)
    s = np.sin(theta) / theta
    c = (1.0 - np.cos(theta)) / (theta2 + 1e-40)
    x, y, z = aa[..., 0], aa[..., 1], aa[..., 2]
    zero = np.zeros_like(x)
    k = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=-1)
    k = k.reshape(aa.shape[:-1] + (3, 3))
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + s[..., None, None] * k + c[..., None, None] * (k @ k)


def expression_offsets(model: MorphableModel, expr: ExpressionParams) -> np.ndarray:
    """(V, 3) additive expression displacement for the whole template."""
    if len(expr.psi) != model.n_expr:
        raise ModelError(f"expected {model.n_expr} expression coefficients")
    if model.n_expr == 0:
        return np.zeros_like(model.template)
    return np.einsum("e,evk->vk", expr.psi, model.expr_basis)


def pose_feature(model: MorphableModel, pose: PoseParams) -> np.ndarray:
    """(n_j, 9) rotation-minus-identity elements per joint."""
    aa = pose.theta.reshape(model.n_joints, 3)
    rots = rodrigues(aa)
    return (rots - np.eye(3)).reshape(model.n_joints, 9)


def joint_positions(model: MorphableModel, expr: ExpressionParams) -> np.ndarray:
    """(n_j, 3) rest joints regressed from the expression-displaced template."""
    shaped = model.template + expression_offsets(model, expr)
    return model.joint_regressor @ shaped


def joint_transforms(model: MorphableModel, pose: PoseParams,
                     expr: ExpressionParams) -> np.ndarray:
    """(n_j, 4, 4) skinning transforms (rest position already removed)."""
    joints = joint_positions(model, expr)
    aa = pose.theta.reshape(model.n_joints, 3)
    rots = rodrigues(aa)
    n_j = model.n_joints
    world = np.zeros((n_j, 4, 4))
    for j in range(n_j):
        local = np.eye(4)
        local[:3, :3] = rots[j]
        parent = model.parents[j]
        if parent < 0:
            local[:3, 3] = joints[j]
            world[j] = local
        else:
            local[:3, 3] = joints[j] - joints[parent]
            world[j] = world[parent] @ local
    a = world.copy()
    # remove the rest-pose joint location: A_j = W_j * [I | -joint_j]
    a[:, :3, 3] -= np.einsum("jab,jb->ja", world[:, :3, :3], joints)
    return a


def global_transform(pose: PoseParams, points: np.ndarray) -> np.ndarray:
    """Apply scale * R * x + t to (..., 3) points."""
    r = rodrigues(pose.global_rot)
    return pose.scale * (points @ r.T) + pose.global_trans


def global_transform_inverse(pose: PoseParams, points: np.ndarray) -> np.ndarray:
    r = rodrigues(pose.global_rot)
    return ((points - pose.global_trans) / pose.scale) @ r


def lbs_forward(model: MorphableModel, pose: PoseParams, expr: ExpressionParams,
                extra_offsets: np.ndarray | None = None) -> np.ndarray:
    """Pose the whole template: blendshapes, skinning, then the global rigid.

    `extra_offsets` (V, 3) are additional canonical-space displacements
    (used for ground-truth contact indentation).
    """
    if len(pose.theta) != 3 * model.n_joints:
        raise ModelError(f"expected {3 * model.n_joints} pose values")
    shaped = model.template + expression_offsets(model, expr)
    feat = pose_feature(model, pose)
    if model.pose_basis.size:
        shaped = shaped + np.einsum("jl,jlvk->vk", feat, model.pose_basis)
    if extra_offsets is not None:
        shaped = shaped + extra_offsets
    a = joint_transforms(model, pose, expr)
    t = np.einsum("vj,jab->vab", model.weights, a)
    posed = np.einsum("vab,vb->va", t[:, :3, :3], shaped) + t[:, :3, 3]
    return global_transform(pose, posed)


def blendshape_offset(basis: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Sum_k coeff_k * basis_k over all leading axes; returns a 3-vector."""
    basis = np.asarray(basis, dtype=np.float64)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != basis.shape[:-1]:
        raise ModelError(f"coefficient shape {coeffs.shape} does not match "
                         f"basis {basis.shape[:-1]}")
    if basis.size == 0:
        return np.zeros(3)
    flat_b = basis.reshape(-1, 3)
    flat_c = coeffs.reshape(-1)
    return flat_c @ flat_b


def point_blend_matrix(attrs: PointBlendAttributes, a: np.ndarray) -> np.ndarray:
    """(4, 4) weighted blend of joint transforms for one point."""
    return np.einsum("j,jab->ab", attrs.W, a)


def forward_point(model: MorphableModel, x_c: np.ndarray,
                  attrs: PointBlendAttributes, pose: PoseParams,
                  expr: ExpressionParams,
                  nonrigid_offset: np.ndarray | None = None) -> np.ndarray:
    """Skin one canonical point with explicit per-point attributes."""
    feat = pose_feature(model, pose)
    x = np.asarray(x_c, dtype=np.float64).copy()
    if model.n_expr:
        x += blendshape_offset(attrs.E, expr.psi)
    x += blendshape_offset(attrs.P, feat)
    if nonrigid_offset is not None:
        x += np.asarray(nonrigid_offset, dtype=np.float64)
    a = joint_transforms(model, pose, expr)
    m = point_blend_matrix(attrs, a)
    posed = m[:3, :3] @ x + m[:3, 3]
    return global_transform(pose, posed)


def inverse_lbs(model: MorphableModel, x_d: np.ndarray,
                attrs: PointBlendAttributes, pose: PoseParams,
                expr: ExpressionParams,
                nonrigid_offset: np.ndarray | None = None) -> np.ndarray:
    """Canonicalize a deformed point: undo the blended joint transform, then
    subtract expression, pose-corrective, and non-rigid offsets."""
    a = joint_transforms(model, pose, expr)
    m = point_blend_matrix(attrs, a)
    lin = m[:3, :3]
    det = np.linalg.det(lin)
    if abs(det) < 1e-12:
        raise ModelError(f"singular blended transform (det={det:.3e})")
    local = global_transform_inverse(pose, np.asarray(x_d, dtype=np.float64))
    x = np.linalg.solve(lin, local - m[:3, 3])
    feat = pose_feature(model, pose)
    if model.n_expr:
        x = x - blendshape_offset(attrs.E, expr.psi)
    x = x - blendshape_offset(attrs.P, feat)
    if nonrigid_offset is not None:
        x = x - np.asarray(nonrigid_offset, dtype=np.float64)
    return x


def vertex_attributes(model: MorphableModel, vid: int) -> PointBlendAttributes:
    """Blend attributes stored at one template vertex."""
    e = model.expr_basis[:, vid, :] if model.n_expr else np.zeros((0, 3))
    return PointBlendAttributes(E=e, P=model.pose_basis[:, :, vid, :],
                                W=model.weights[vid])


def nearest_vertex_ids(posed_verts: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Brute-force nearest deformed vertex per query; ties go to the lower
    index (argmin picks the first minimum)."""
    xs = np.atleast_2d(xs)
    d2 = ((posed_verts[None, :, :] - xs[:, None, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def nearest_vertex_attributes(model: MorphableModel, x: np.ndarray,
                              pose: PoseParams, expr: ExpressionParams,
                              posed_verts: np.ndarray | None = None
                              ) -> PointBlendAttributes:
    """Attributes of the deformed-space nearest template vertex."""
    if model.n_verts == 0:
        raise ModelError("empty model")
    if posed_verts is None:
        posed_verts = lbs_forward(model, pose, expr)
    vid = int(nearest_vertex_ids(posed_verts, np.asarray(x))[0])
    return vertex_attributes(model, vid)


# ---------------------------------------------------------------------------
# procedural toy models


@dataclass
class ToyHeadConfig:
    subdivisions: int = 4
    n_expr: int = 50
    seed: int = 0
    radii: tuple = (0.075, 0.095, 0.085)   # x half-width, y height, z depth
    expr_amplitude: float = 0.0025          # meters, per unit coefficient
    pose_corr_amplitude: float = 0.0004


@dataclass
class ToyHandConfig:
    ring_segments: int = 8
    seed: int = 0
    pose_corr_amplitude: float = 0.0002


def icosphere(subdivisions: int):
    """Unit icosphere with deterministic vertex order."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        verts_list = list(verts)
        midpoint: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in midpoint:
                m = verts_list[i] + verts_list[j]
                m = m / np.linalg.norm(m)
                midpoint[key] = len(verts_list)
                verts_list.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc],
                              [ab, bc, ca]])
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=np.int64)
    return verts, faces


def _bump_field(verts: np.ndarray, centers, sigmas, directions, amps) -> np.ndarray:
    """(V, 3) sum of Gaussian displacement bumps."""
    out = np.zeros_like(verts)
    for c, s, d, a in zip(centers, sigmas, directions, amps):
        w = np.exp(-((verts - c) ** 2).sum(axis=1) / (2.0 * s * s))
        out += a * w[:, None] * d
    return out


def _smooth_random_basis(verts: np.ndarray, n_fields: int, amp: float,
                         rng: np.random.Generator, bumps_per_field: int = 3,
                         sigma_range=(0.018, 0.035)) -> np.ndarray:
    """(n_fields, V, 3) seeded smooth displacement fields."""
    v = len(verts)
    if n_fields == 0:
        return np.zeros((0, v, 3))
    fields = np.zeros((n_fields, v, 3))
    for k in range(n_fields):
        centers = verts[rng.integers(0, v, size=bumps_per_field)]
        sigmas = rng.uniform(*sigma_range, size=bumps_per_field)
        dirs = rng.normal(size=(bumps_per_field, 3))
        dirs /= np.linalg.norm(dirs, axis=1)[:, None]
        amps = rng.normal(0.0, amp, size=bumps_per_field)
        fields[k] = _bump_field(verts, centers, sigmas, dirs, amps)
    return fields


def _nearest_to(verts: np.ndarray, target) -> int:
    return int(np.argmin(((verts - np.asarray(target)) ** 2).sum(axis=1)))


def _region_mean_regressor_row(verts: np.ndarray, mask: np.ndarray) -> np.ndarray:
    row = np.zeros(len(verts))
    idx = np.where(mask)[0]
    row[idx] = 1.0 / len(idx)
    return row


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def make_toy_head(config: ToyHeadConfig | None = None) -> MorphableModel:
    """Ellipsoid head with nose/chin bumps, 5 joints, smooth seeded bases.

    Joints: 0 root (neck base), 1 neck, 2 jaw, 3/4 eye analogs. The face
    looks along -z; +y is up.
    """
    cfg = config or ToyHeadConfig()
    rng = np.random.default_rng(cfg.seed)
    unit, faces = icosphere(cfg.subdivisions)
    rx, ry, rz = cfg.radii
    verts = unit * np.array([rx, ry, rz])

    # nose and chin bumps along the local outward direction
    nose_dir = np.array([0.0, -0.15, -1.0])
    nose_dir /= np.linalg.norm(nose_dir)
    chin_dir = np.array([0.0, -0.85, -0.55])
    chin_dir /= np.linalg.norm(chin_dir)
    for d, height, width in ((nose_dir, 0.020, 0.28), (chin_dir, 0.010, 0.35)):
        cosang = unit @ d
        w = np.exp(-np.maximum(0.0, 1.0 - cosang) / (width * width))
        verts = verts + height * w[:, None] * unit

    v = len(verts)
    y, z = verts[:, 1], verts[:, 2]

    # joint regressor rows from vertex-region means
    root_mask = y < -0.80 * ry
    neck_mask = (y > -0.75 * ry) & (y < -0.45 * ry)
    jaw_mask = (np.abs(y + 0.01) < 0.018) & (z > 0.25 * rz)
    eye_l = ((verts - np.array([-0.034, 0.020, -0.9 * rz])) ** 2).sum(axis=1) < 0.022 ** 2
    eye_r = ((verts - np.array([0.034, 0.020, -0.9 * rz])) ** 2).sum(axis=1) < 0.022 ** 2
    regressor = np.stack([
        _region_mean_regressor_row(verts, root_mask),
        _region_mean_regressor_row(verts, neck_mask),
        _region_mean_regressor_row(verts, jaw_mask),
        _region_mean_regressor_row(verts, eye_l),
        _region_mean_regressor_row(verts, eye_r),
    ])
    parents = np.array([-1, 0, 1, 1, 1], dtype=np.int64)

    # skinning: compactly supported masks, remainder goes to the root
    w_neck = 0.65 * _smoothstep((-y - 0.30 * ry) / (0.35 * ry))
    jaw_region = _smoothstep((-y - 0.005) / 0.035) * _smoothstep((-z + 0.15 * rz) / (0.30 * rz))
    w_jaw = 0.95 * np.where(jaw_region > 1e-4, jaw_region, 0.0)
    d_eye_l = np.sqrt(((verts - np.array([-0.034, 0.020, -0.9 * rz])) ** 2).sum(axis=1))
    d_eye_r = np.sqrt(((verts - np.array([0.034, 0.020, -0.9 * rz])) ** 2).sum(axis=1))
    w_el = 0.9 * np.where(d_eye_l < 0.016, _smoothstep(1.0 - d_eye_l / 0.016), 0.0)
    w_er = 0.9 * np.where(d_eye_r < 0.016, _smoothstep(1.0 - d_eye_r / 0.016), 0.0)
    # jaw support excludes the upper face by construction; keep eyes out of it
    w_jaw = np.where((w_el > 0) | (w_er > 0), 0.0, w_jaw)
    other = np.stack([w_neck, w_jaw, w_el, w_er], axis=1)
    total = other.sum(axis=1)
    scale = np.where(total > 0.999, 0.999 / np.where(total > 0, total, 1.0), 1.0)
    other *= scale[:, None]
    w_root = 1.0 - other.sum(axis=1)
    weights = np.column_stack([w_root, other])
    weights /= weights.sum(axis=1)[:, None]

    expr_basis = _smooth_random_basis(verts, cfg.n_expr, cfg.expr_amplitude, rng)
    pose_basis = _smooth_random_basis(
        verts, 5 * 9, cfg.pose_corr_amplitude, rng,
        bumps_per_field=2).reshape(5, 9, v, 3)
    # correctives act only where the joint has skinning influence
    pose_basis *= weights.T[:, None, :, None]

    lmk_targets = [
        (0.0, -0.035, -1.06 * rz),            # nose tip
        (0.0, -0.085, -0.75 * rz),            # chin
        (-0.034, 0.020, -0.93 * rz), (0.034, 0.020, -0.93 * rz),   # eyes
        (-0.020, -0.055, -0.85 * rz), (0.020, -0.055, -0.85 * rz),  # mouth
        (-0.055, -0.010, -0.55 * rz), (0.055, -0.010, -0.55 * rz),  # cheeks
        (-0.030, 0.055, -0.80 * rz), (0.030, 0.055, -0.80 * rz),    # brows
        (0.0, 0.085, -0.55 * rz),             # forehead
        (-0.065, -0.045, -0.20 * rz), (0.065, -0.045, -0.20 * rz),  # jawline
        (-0.072, 0.020, 0.0), (0.072, 0.020, 0.0),                  # temples
        (0.0, -0.015, -1.00 * rz),            # nose bridge
        (-0.012, -0.040, -0.95 * rz), (0.012, -0.040, -0.95 * rz),  # nostrils
        (0.0, -0.070, -0.80 * rz),            # under-lip
        (0.0, 0.0, 1.0 * rz),                 # back of head
    ]
    landmarks = np.array(sorted({_nearest_to(verts, t) for t in lmk_targets}),
                         dtype=np.int64)

    normals = vertex_normals(verts, faces)
    contact = np.where((normals[:, 2] < -0.25) & (y < 0.045) & (y > -0.09))[0]

    model = MorphableModel(
        template=verts, faces=faces, expr_basis=expr_basis,
        pose_basis=pose_basis, weights=weights, joint_regressor=regressor,
        parents=parents, landmarks=landmarks,
        fingertips=np.zeros(0, dtype=np.int64),
        contact_verts=contact.astype(np.int64), kind="head")
    model.validate()
    return model


def _finger_tube(base: np.ndarray, direction: np.ndarray, length: float,
                 r0: float, r1: float, segments: int, v_offset: int):
    """Closed tapered tube with rounded caps; returns verts, faces, and the
    tip-apex vertex index (relative to v_offset)."""
    direction = direction / np.linalg.norm(direction)
    ref = np.array([0.0, 1.0, 0.0])
    if abs(direction @ ref) > 0.9:
        ref = np.array([1.0, 0.0, 0.0])
    u = np.cross(direction, ref)
    u /= np.linalg.norm(u)
    w = np.cross(direction, u)

    tip_center = base + direction * length
    rings: list[tuple[np.ndarray, float]] = []
    # base cap ring at 45 degrees
    rings.append((base - direction * (r0 * np.sin(np.pi / 4)),
                  r0 * np.cos(np.pi / 4)))
    for t in np.linspace(0.0, 1.0, 9):
        rings.append((base + direction * (t * length), r0 + (r1 - r0) * t))
    # hemispherical tip: rings at 30 and 60 degrees, then the apex
    for ang in (np.pi / 6, np.pi / 3):
        rings.append((tip_center + direction * (r1 * np.sin(ang)),
                      r1 * np.cos(ang)))

    angles = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    ring_dirs = np.outer(np.cos(angles), u) + np.outer(np.sin(angles), w)
    verts = [base - direction * r0]          # base apex
    for center, r in rings:
        verts.extend(center + r * ring_dirs)
    verts.append(tip_center + direction * r1)  # tip apex
    verts = np.array(verts)

    faces = []
    for s in range(segments):
        faces.append([0, 1 + s, 1 + (s + 1) % segments])
    for ring in range(len(rings) - 1):
        a0 = 1 + ring * segments
        b0 = 1 + (ring + 1) * segments
        for s in range(segments):
            s1 = (s + 1) % segments
            faces.append([a0 + s, b0 + s, b0 + s1])
            faces.append([a0 + s, b0 + s1, a0 + s1])
    apex = len(verts) - 1
    last = 1 + (len(rings) - 1) * segments
    for s in range(segments):
        faces.append([last + s, apex, last + (s + 1) % segments])
    faces = np.array(faces, dtype=np.int64)[:, [0, 2, 1]] + v_offset
    return verts, faces, apex + v_offset


def make_toy_hand(config: ToyHandConfig | None = None) -> MorphableModel:
    """Palm ellipsoid plus five closed finger tubes, 16 joints.

    Local frame: fingers extend along +z, palm normal is +y, thumb on +x.
    Finger bases sit 1.5 mm off the palm surface so each component stays a
    closed solid and the parity inside-test remains exact.
    """
    cfg = config or ToyHandConfig()
    rng = np.random.default_rng(cfg.seed)

    palm_center = np.array([0.0, 0.0, -0.030])
    palm_radii = np.array([0.042, 0.012, 0.038])
    unit, palm_faces = icosphere(2)
    palm_verts = unit * palm_radii + palm_center

    verts_all = [palm_verts]
    faces_all = [palm_faces]
    joint_pos = [np.array([0.0, 0.0, -0.055])]   # wrist root
    parents = [-1]
    tips = []
    finger_axes = []
    finger_specs = []

    xs = (-0.030, -0.010, 0.010, 0.030)
    lengths = (0.064, 0.072, 0.066, 0.052)
    for fx, ln in zip(xs, lengths):
        # palm surface z-extent at this x, plus clearance
        frac = min(abs(fx) / palm_radii[0], 0.999)
        z_surf = palm_center[2] + palm_radii[2] * np.sqrt(1.0 - frac * frac)
        base = np.array([fx, 0.0, z_surf + 0.0015])
        direction = np.array([0.12 * fx / 0.03, 0.0, 1.0])
        finger_specs.append((base, direction, ln, 0.0072, 0.0058))
    # thumb
    finger_specs.append((np.array([0.040, 0.0, -0.022]),
                         np.array([0.85, 0.05, 0.65]), 0.050, 0.0082, 0.0068))

    offset = len(palm_verts)
    for base, direction, ln, r0, r1 in finger_specs:
        fv, ff, tip = _finger_tube(base, direction, ln, r0, r1,
                                   cfg.ring_segments, offset)
        verts_all.append(fv)
        faces_all.append(ff)
        tips.append(tip)
        direction = direction / np.linalg.norm(direction)
        finger_axes.append((base, direction, ln))
        offset += len(fv)

    verts = np.concatenate(verts_all)
    faces = np.concatenate(faces_all)
    v = len(verts)

    # joints: 3 per finger (knuckle, mid, distal), children of the root
    for base, direction, ln in finger_axes:
        j0 = len(joint_pos)
        joint_pos.append(base)
        parents.append(0)
        joint_pos.append(base + direction * (0.45 * ln))
        parents.append(j0)
        joint_pos.append(base + direction * (0.75 * ln))
        parents.append(j0 + 1)
    joint_pos = np.array(joint_pos)
    parents = np.array(parents, dtype=np.int64)
    n_j = len(joint_pos)   # 16

    # regressor: nearest-vertex shells around each target joint position
    regressor = np.zeros((n_j, v))
    for j in range(n_j):
        d = np.linalg.norm(verts - joint_pos[j], axis=1)
        idx = np.argsort(d)[:10]
        inv = 1.0 / (d[idx] + 1e-6)
        regressor[j, idx] = inv / inv.sum()

    # skinning: palm on root; finger vertices blend along the chain
    weights = np.zeros((v, n_j))
    weights[:len(palm_verts), 0] = 1.0
    cursor = len(palm_verts)
    for f, (base, direction, ln) in enumerate(finger_axes):
        n_fv = len(verts_all[f + 1])
        seg = verts[cursor:cursor + n_fv]
        t = (seg - base) @ direction / ln   # 0 at knuckle, 1 at tip
        j0 = 1 + 3 * f
        blend = 0.05   # smooth band between segments, in t units
        w1 = 1.0 - _smoothstep((t - (0.45 - blend)) / (2 * blend))
        w3 = _smoothstep((t - (0.75 - blend)) / (2 * blend))
        w2 = np.clip(1.0 - w1 - w3, 0.0, 1.0)
        weights[cursor:cursor + n_fv, j0] = w1
        weights[cursor:cursor + n_fv, j0 + 1] = w2
        weights[cursor:cursor + n_fv, j0 + 2] = w3
        cursor += n_fv
    weights /= weights.sum(axis=1)[:, None]

    pose_basis = _smooth_random_basis(
        verts, n_j * 9, cfg.pose_corr_amplitude, rng, bumps_per_field=2,
        sigma_range=(0.01, 0.02)).reshape(n_j, 9, v, 3)
    pose_basis *= weights.T[:, None, :, None]

    knuckles = [_nearest_to(verts, joint_pos[1 + 3 * f] + np.array([0, 0.007, 0]))
                for f in range(5)]
    palm_marks = [_nearest_to(verts, palm_center + np.array([dx, 0.012, dz]))
                  for dx, dz in ((-0.02, 0.0), (0.02, 0.0), (0.0, -0.025))]
    landmarks = np.array(sorted(set(tips) | set(knuckles) | set(palm_marks)),
                         dtype=np.int64)

    model = MorphableModel(
        template=verts, faces=faces, expr_basis=np.zeros((0, v, 3)),
        pose_basis=pose_basis, weights=weights, joint_regressor=regressor,
        parents=parents, landmarks=landmarks,
        fingertips=np.array(tips, dtype=np.int64),
        contact_verts=np.zeros(0, dtype=np.int64), kind="hand")
    model.validate()
    return model


# ---------------------------------------------------------------------------
# model file io (JSON with base64 arrays)


def _enc(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr)
    return {"shape": list(arr.shape), "dtype": str(arr.dtype),
            "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _dec(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype=obj["dtype"]).reshape(obj["shape"]).copy()


_ARRAY_FIELDS = ("template", "faces", "expr_basis", "pose_basis", "weights",
                 "joint_regressor", "parents", "landmarks", "fingertips",
                 "contact_verts")


def save_model(path, model: MorphableModel) -> None:
    doc = {"version": MODEL_FILE_VERSION, "kind": model.kind}
    for name in _ARRAY_FIELDS:
        doc[name] = _enc(getattr(model, name))
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_model(path) -> MorphableModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != MODEL_FILE_VERSION:
        raise ModelError(f"unsupported model file version {doc.get('version')}")
    kwargs = {name: _dec(doc[name]) for name in _ARRAY_FIELDS}
    model = MorphableModel(kind=doc["kind"], **kwargs)
    model.validate()
    return model
