"""Deterministic synthetic data: renders RGB/depth/mask/landmark observations
from ground-truth toy-model sequences, simulates contact indentation, and
emits noisy initial tracks standing in for off-the-shelf pose estimators.

World frame equals the default camera frame: +z away from the camera,
+y down, the head centered around (0, 0, 0.45). All units meters.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.interpolate import CubicSpline

from . import morphable as mm
from .meshes import (MeshDistanceField, ray_triangle_intersect,
                     vertex_normals)
from .morphable import ExpressionParams, MorphableModel, PoseParams
from .tracks import DEFAULT_OPTIMIZE, FrameTrack

DATASET_VERSION = 1
DEPTH_QUANTUM = 1e-4           # meters per stored depth unit (0.1 mm)
LANDMARK_OCCLUSION_MARGIN = 1e-3
SCENARIOS = ("chin-rest", "cheek-poke", "cheek-press-slide", "no-contact")

_LIGHT_DIR = np.array([-0.35, -0.45, -0.82])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)


class SceneError(ValueError):
    pass


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rot: np.ndarray = field(default_factory=lambda: np.eye(3))   # world->cam
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rot = np.asarray(self.rot, dtype=np.float64)
        self.trans = np.asarray(self.trans, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise SceneError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise SceneError("principal point must lie inside the image")

    def world_to_cam(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rot.T + self.trans

    def project(self, pts: np.ndarray):
        """Continuous pixel coords (u, v) and camera-frame depth z."""
        cam = self.world_to_cam(np.atleast_2d(pts))
        z = cam[:, 2]
        u = self.fx * cam[:, 0] / z + self.cx
        v = self.fy * cam[:, 1] / z + self.cy
        return u, v, z

    def pixel_rays(self, rows: np.ndarray, cols: np.ndarray):
        """World-frame origins/directions through pixel centers; also the
        per-ray factor converting ray length to camera depth."""
        u = np.asarray(cols, dtype=np.float64) + 0.5
        v = np.asarray(rows, dtype=np.float64) + 0.5
        d_cam = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy,
                          np.ones_like(u)], axis=1)
        norm = np.linalg.norm(d_cam, axis=1)
        d_cam = d_cam / norm[:, None]
        dirs = d_cam @ self.rot
        origin = -self.rot.T @ self.trans
        origins = np.broadcast_to(origin, dirs.shape).copy()
        return origins, dirs, d_cam[:, 2]

    def to_doc(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "rot": self.rot.tolist(), "trans": self.trans.tolist()}

    @staticmethod
    def from_doc(d: dict) -> "Camera":
        return Camera(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                      width=d["width"], height=d["height"],
                      rot=np.array(d["rot"]), trans=np.array(d["trans"]))


def default_camera(size: int = 64) -> Camera:
    return Camera(fx=1.1 * size, fy=1.1 * size, cx=size / 2, cy=size / 2,
                  width=size, height=size)


@dataclass
class FrameObservation:
    rgb: np.ndarray            # (H, W, 3) float in [0, 1], quantized to 8 bit
    depth: np.ndarray          # (H, W) meters, 0 = no surface
    mask_face: np.ndarray      # (H, W) uint8 {0, 1}
    mask_hand: np.ndarray      # (H, W) uint8 {0, 1}
    lmk_face: np.ndarray       # (Lf, 2) pixel coords
    lmk_face_occluded: np.ndarray
    lmk_hand: np.ndarray
    lmk_hand_occluded: np.ndarray
    frame_index: int = 0


@dataclass
class GroundTruthFrame:
    face_pose: PoseParams
    face_expr: ExpressionParams
    hand_pose: PoseParams
    displacement: np.ndarray   # (V, 3) canonical-space non-rigid offsets
    contact_flags: np.ndarray  # (V,) bool

    def __post_init__(self):
        off = np.linalg.norm(self.displacement, axis=1)
        if np.any(off[~self.contact_flags] > 0):
            raise SceneError("displacement must be zero where contact is false")


# ---------------------------------------------------------------------------
# rasterization


def _shade(verts, faces, albedo):
    n = vertex_normals(verts, faces)
    lam = np.maximum(0.0, -(n @ _LIGHT_DIR))
    return np.clip(albedo * (0.35 + 0.65 * lam[:, None]), 0.0, 1.0)


def rasterize(camera: Camera, meshes, near: float = 0.05):
    """Z-buffer rasterization of [(verts, faces, vertex_colors), ...].

    Returns (zbuf, model id map, color image). Depth is perspective-correct
    (1/z interpolated), so a covered pixel's depth equals the ray-triangle
    intersection depth at the pixel center.
    """
    h, w = camera.height, camera.width
    zbuf = np.full((h, w), np.inf)
    mid_map = np.full((h, w), -1, dtype=np.int32)
    color = np.zeros((h, w, 3))
    for mid, (verts, faces, vcol) in enumerate(meshes):
        u, v, z = camera.project(verts)
        for tri in faces:
            tz = z[tri]
            if np.any(tz < near):
                continue
            tu, tv = u[tri], v[tri]
            c0 = max(int(np.floor(tu.min() - 0.5)), 0)
            c1 = min(int(np.ceil(tu.max() - 0.5)), w - 1)
            r0 = max(int(np.floor(tv.min() - 0.5)), 0)
            r1 = min(int(np.ceil(tv.max() - 0.5)), h - 1)
            if c0 > c1 or r0 > r1:
                continue
            px = np.arange(c0, c1 + 1) + 0.5
            py = np.arange(r0, r1 + 1) + 0.5
            gx, gy = np.meshgrid(px, py)
            x0, y0 = tu[0], tv[0]
            x1, y1 = tu[1], tv[1]
            x2, y2 = tu[2], tv[2]
            area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
            if abs(area) < 1e-12:
                continue
            l0 = ((x1 - gx) * (y2 - gy) - (y1 - gy) * (x2 - gx)) / area
            l1 = ((x2 - gx) * (y0 - gy) - (y2 - gy) * (x0 - gx)) / area
            l2 = 1.0 - l0 - l1
            inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
            if not inside.any():
                continue
            invz = l0 / tz[0] + l1 / tz[1] + l2 / tz[2]
            zp = 1.0 / invz
            window = (slice(r0, r1 + 1), slice(c0, c1 + 1))
            closer = inside & (zp < zbuf[window])
            if not closer.any():
                continue
            cols = vcol[tri]
            cp = (l0[..., None] * cols[0] / tz[0]
                  + l1[..., None] * cols[1] / tz[1]
                  + l2[..., None] * cols[2] / tz[2]) * zp[..., None]
            zwin = zbuf[window]
            mwin = mid_map[window]
            cwin = color[window]
            zwin[closer] = zp[closer]
            mwin[closer] = mid
            cwin[closer] = cp[closer]
    return zbuf, mid_map, color


def _project_landmarks(camera, verts, lmk_ids, zbuf):
    u, v, z = camera.project(verts[lmk_ids])
    cols = np.floor(u).astype(int)
    rows = np.floor(v).astype(int)
    occluded = ((cols < 0) | (cols >= camera.width)
                | (rows < 0) | (rows >= camera.height))
    cr = np.clip(rows, 0, camera.height - 1)
    cc = np.clip(cols, 0, camera.width - 1)
    occluded |= z > zbuf[cr, cc] + LANDMARK_OCCLUSION_MARGIN
    return np.stack([u, v], axis=1), occluded


def face_albedo(model: MorphableModel) -> np.ndarray:
    p = model.template
    base = np.array([0.78, 0.60, 0.50])
    ramp = 0.16 * np.stack([np.sin(55.0 * p[:, 0]),
                            np.sin(55.0 * p[:, 1] + 1.3),
                            np.sin(55.0 * p[:, 2] + 2.1)], axis=1)
    return np.clip(base + ramp, 0.05, 0.95)


def hand_albedo(model: MorphableModel) -> np.ndarray:
    p = model.template
    base = np.array([0.45, 0.52, 0.78])
    ramp = 0.14 * np.stack([np.sin(70.0 * p[:, 2]),
                            np.sin(70.0 * p[:, 0] + 0.7),
                            np.sin(70.0 * p[:, 1] + 1.9)], axis=1)
    return np.clip(base + ramp, 0.05, 0.95)


def render_frame(head: MorphableModel, hand: MorphableModel,
                 gt: GroundTruthFrame, camera: Camera,
                 frame_index: int = 0) -> FrameObservation:
    """Rasterize the ground-truth frame into an observation."""
    face_verts = mm.lbs_forward(head, gt.face_pose, gt.face_expr,
                                extra_offsets=gt.displacement)
    hand_verts = mm.lbs_forward(hand, gt.hand_pose,
                                ExpressionParams.zeros(hand.n_expr))
    face_col = _shade(face_verts, head.faces, face_albedo(head))
    hand_col = _shade(hand_verts, hand.faces, hand_albedo(hand))
    zbuf, mid_map, color = rasterize(
        camera, [(face_verts, head.faces, face_col),
                 (hand_verts, hand.faces, hand_col)])

    depth = np.where(np.isfinite(zbuf), zbuf, 0.0)
    depth = np.round(depth / DEPTH_QUANTUM) * DEPTH_QUANTUM
    rgb = np.round(np.clip(color, 0.0, 1.0) * 255.0) / 255.0

    lmk_f, occ_f = _project_landmarks(camera, face_verts, head.landmarks, zbuf)
    lmk_h, occ_h = _project_landmarks(camera, hand_verts, hand.landmarks, zbuf)
    return FrameObservation(
        rgb=rgb, depth=depth,
        mask_face=(mid_map == 0).astype(np.uint8),
        mask_hand=(mid_map == 1).astype(np.uint8),
        lmk_face=lmk_f, lmk_face_occluded=occ_f,
        lmk_hand=lmk_h, lmk_hand_occluded=occ_h,
        frame_index=frame_index)


# ---------------------------------------------------------------------------
# contact indentation


def simulate_indentation(face_verts: np.ndarray, face_normals: np.ndarray,
                         hand_field: MeshDistanceField, sigma: float = 0.010,
                         clearance: float = 1e-4):
    """Analytic indentation standing in for a physical simulation.

    Each face vertex inside the hand moves inward along its own normal by
    its penetration depth, measured as the ray-exit distance along that
    normal (first hand-surface crossing from inside); neighbors follow a
    Gaussian envelope with falloff `sigma`, zero beyond 3 sigma. A final
    verification pass nudges any residual offender so every displaced
    vertex ends up outside the hand within `clearance`.

    Returns deformed-space displacements (V, 3) and contact flags.
    """
    v = len(face_verts)
    lo, hi = hand_field.bounds
    margin = 3.0 * sigma + 0.01
    near = np.all((face_verts > lo - margin) & (face_verts < hi + margin), axis=1)
    disp = np.zeros((v, 3))
    flags = np.zeros(v, dtype=bool)
    if not near.any():
        return disp, flags
    inside = np.zeros(v, dtype=bool)
    inside[near] = hand_field.contains(face_verts[near])
    pen_ids = np.nonzero(inside)[0]
    if len(pen_ids) == 0:
        return disp, flags

    # exit distance along -n: first crossing of the closed hand surface
    t_exit, fid, _ = ray_triangle_intersect(
        face_verts[pen_ids], -face_normals[pen_ids],
        hand_field.verts, hand_field.faces)
    fallback = ~np.isfinite(t_exit)
    if fallback.any():
        t_exit[fallback] = -hand_field.signed_distance(
            face_verts[pen_ids[fallback]])
    pen = t_exit + 0.5 * clearance

    # smooth magnitude: envelope of per-contact Gaussians, cut at 3 sigma
    sources = face_verts[pen_ids]
    d2 = ((face_verts[:, None, :] - sources[None, :, :]) ** 2).sum(axis=2)
    gauss = pen[None, :] * np.exp(-d2 / (2.0 * sigma * sigma))
    gauss[d2 > (3.0 * sigma) ** 2] = 0.0
    mag = gauss.max(axis=1)
    mag[pen_ids] = np.maximum(mag[pen_ids], pen)

    # verification: anything still (or newly) inside gets nudged out
    active = mag > 1e-9
    for _ in range(8):
        moved = face_verts[active] - mag[active, None] * face_normals[active]
        sd_new = hand_field.signed_distance(moved)
        viol = sd_new < -clearance * 0.5
        if not viol.any():
            break
        ids = np.nonzero(active)[0][viol]
        mag[ids] += -sd_new[viol] + clearance * 0.25

    disp[active] = -mag[active, None] * face_normals[active]
    flags[:] = active
    return disp, flags


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class SequenceConfig:
    image_size: int = 64
    head: mm.ToyHeadConfig = field(default_factory=mm.ToyHeadConfig)
    hand: mm.ToyHandConfig = field(default_factory=mm.ToyHandConfig)
    head_center: tuple = (0.0, 0.0, 0.45)
    indent_sigma: float = 0.010
    yaw_amplitude: float = 0.45
    pitch_amplitude: float = 0.22
    expr_amplitude: float = 0.35


@dataclass
class SyntheticSequence:
    scenario: str
    seed: int
    head: MorphableModel
    hand: MorphableModel
    camera: Camera
    frames: list        # [(GroundTruthFrame, FrameObservation)]
    config: SequenceConfig


def _spline(rng, ts, lo, hi, n_ctrl=5):
    cps = rng.uniform(lo, hi, n_ctrl)
    return CubicSpline(np.linspace(0.0, 1.0, n_ctrl), cps)(ts)


def _sweep_spline(rng, ts, amplitude, n_ctrl=6):
    signs = np.array([(-1.0) ** k for k in range(n_ctrl)])
    cps = amplitude * signs * rng.uniform(0.6, 1.0, n_ctrl)
    return CubicSpline(np.linspace(0.0, 1.0, n_ctrl), cps)(ts)


def _plateau(t, t0, t1, ramp):
    up = np.clip((t - t0) / ramp, 0.0, 1.0)
    down = np.clip((t1 - t) / ramp, 0.0, 1.0)
    return (up * up * (3 - 2 * up)) * (down * down * (3 - 2 * down))


def rotation_to_axis_angle(r: np.ndarray) -> np.ndarray:
    cos = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos)
    if angle < 1e-10:
        return np.zeros(3)
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    norm = np.linalg.norm(axis)
    if norm < 1e-12:
        # angle near pi: take the dominant diagonal axis
        k = int(np.argmax(np.diag(r)))
        axis = np.sqrt(np.maximum(0.0, (np.diag(r) + 1.0) / 2.0))
        axis[k] = np.sqrt(max(0.0, (r[k, k] + 1.0) / 2.0))
        axis = axis / np.linalg.norm(axis)
        return axis * angle
    return axis / norm * angle


def _euler_rotation(yaw, pitch, roll):
    return (mm.rodrigues(np.array([0.0, yaw, 0.0]))
            @ mm.rodrigues(np.array([pitch, 0.0, 0.0]))
            @ mm.rodrigues(np.array([0.0, 0.0, roll])))


def _frame_from_z(z_dir: np.ndarray, roll: float) -> np.ndarray:
    z = z_dir / np.linalg.norm(z_dir)
    up = np.array([0.0, 1.0, 0.0])
    if abs(z @ up) > 0.93:
        up = np.array([1.0, 0.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.column_stack([x, y, z])
    return r @ mm.rodrigues(np.array([0.0, 0.0, roll]))


def _grip_theta(n_joints: int, t: float, extend_finger: int = 1) -> np.ndarray:
    """Natural curl with one finger extended for poking."""
    theta = np.zeros(3 * n_joints)
    curls = [(0.12, 0.16, 0.10) if f == extend_finger else (0.5, 0.62, 0.5)
             for f in range(4)]
    curls.append((0.25, 0.3, 0.2))   # thumb
    for f, c in enumerate(curls):
        wob = 0.04 * np.sin(2 * np.pi * (t + 0.17 * f))
        for s in range(3):
            theta[3 * (1 + 3 * f + s)] = -(c[s] + wob)
    return theta


def _penetration_profile(scenario: str, ts: np.ndarray, rng) -> np.ndarray:
    """Signed fingertip penetration target: > 0 in contact, < 0 hovering."""
    if scenario == "cheek-poke":
        return (-0.020 + 0.026 * (_plateau(ts, 0.16, 0.46, 0.08)
                                  + _plateau(ts, 0.54, 0.88, 0.08)))
    if scenario == "chin-rest":
        return -0.018 + 0.022 * _plateau(ts, 0.16, 0.92, 0.10)
    if scenario == "cheek-press-slide":
        return -0.018 + 0.023 * _plateau(ts, 0.20, 0.84, 0.09)
    if scenario == "no-contact":
        phase = rng.uniform(0.0, 2 * np.pi)
        return -0.030 + 0.012 * np.sin(2 * np.pi * 1.3 * ts + phase)
    raise SceneError(f"unknown scenario '{scenario}'")


_CONTACT_TARGETS = {
    "cheek-poke": np.array([0.055, -0.028, -0.050]),
    "chin-rest": np.array([0.012, -0.088, -0.038]),
    "cheek-press-slide": np.array([0.056, -0.034, -0.046]),
    "no-contact": np.array([0.055, -0.028, -0.050]),
}


def generate_sequence(seed: int, n_frames: int, scenario: str,
                      config: SequenceConfig | None = None) -> SyntheticSequence:
    """Deterministic scripted sequence with observations."""
    if scenario not in SCENARIOS:
        raise SceneError(f"unknown scenario '{scenario}'")
    cfg = config or SequenceConfig()
    rng = np.random.default_rng(seed)
    head = mm.make_toy_head(replace(cfg.head, seed=cfg.head.seed + seed))
    hand = mm.make_toy_hand(replace(cfg.hand, seed=cfg.hand.seed + seed))
    camera = default_camera(cfg.image_size)
    center = np.asarray(cfg.head_center)

    ts = np.linspace(0.0, 1.0, n_frames) if n_frames > 1 else np.array([0.5])
    yaw = _sweep_spline(rng, ts, cfg.yaw_amplitude)
    pitch = _sweep_spline(rng, ts, cfg.pitch_amplitude, n_ctrl=5)
    roll = _spline(rng, ts, -0.06, 0.06)
    wiggle = np.stack([_spline(rng, ts, -0.006, 0.006) for _ in range(3)], axis=1)
    psi_traj = np.stack([_spline(rng, ts, -cfg.expr_amplitude, cfg.expr_amplitude,
                                 n_ctrl=4) for _ in range(head.n_expr)], axis=1)
    jaw = np.clip(_spline(rng, ts, -0.02, 0.14), 0.0, None)
    pen_profile = _penetration_profile(scenario, ts, rng)
    roll_hand = _spline(rng, ts, -0.25, 0.25)

    # contact vertex: the contact-prone vertex nearest the scenario target
    cand = head.contact_verts
    target_local = _CONTACT_TARGETS[scenario]
    cv = cand[np.argmin(((head.template[cand] - target_local) ** 2).sum(axis=1))]
    slide_dir = np.array([0.0, 1.0, 0.0])

    poke_finger = 1
    tip_vid = int(hand.fingertips[poke_finger])

    frames = []
    for i in range(n_frames):
        face_rot = _euler_rotation(yaw[i], pitch[i], roll[i])
        theta = np.zeros(3 * head.n_joints)
        theta[6] = jaw[i]                      # jaw joint, x-axis
        face_pose = PoseParams(theta=theta,
                               global_rot=rotation_to_axis_angle(face_rot),
                               global_trans=center + wiggle[i], scale=1.0)
        face_expr = ExpressionParams(psi=psi_traj[i].copy())
        face_verts = mm.lbs_forward(head, face_pose, face_expr)
        normals = vertex_normals(face_verts, head.faces)

        target = face_verts[cv]
        n_c = normals[cv]
        if scenario == "cheek-press-slide":
            tangent = slide_dir - (slide_dir @ n_c) * n_c
            tangent /= np.linalg.norm(tangent)
            s = 0.018 * _plateau(ts[i], 0.30, 1.2, 0.35)
            target = target + s * tangent
        # fingertip apex lands `pen` below the face surface (negative: hover)
        tip_target = target - n_c * pen_profile[i]

        grip = _grip_theta(hand.n_joints, ts[i])
        hand_rot = _frame_from_z(-n_c, roll_hand[i])
        local = mm.lbs_forward(hand, PoseParams(theta=grip),
                               ExpressionParams.zeros(0))
        t_h = tip_target - hand_rot @ local[tip_vid]
        hand_pose = PoseParams(theta=grip,
                               global_rot=rotation_to_axis_angle(hand_rot),
                               global_trans=t_h, scale=1.0)

        hand_verts = mm.lbs_forward(hand, hand_pose, ExpressionParams.zeros(0))
        hand_field = MeshDistanceField(hand_verts, hand.faces)
        disp_d, flags = simulate_indentation(face_verts, normals, hand_field,
                                             sigma=cfg.indent_sigma)

        # pull deformed-space displacements back to canonical space
        disp_c = np.zeros_like(disp_d)
        if flags.any():
            a = mm.joint_transforms(head, face_pose, face_expr)
            lin = np.einsum("vj,jab->vab", head.weights[flags], a[:, :3, :3])
            g = mm.rodrigues(face_pose.global_rot) * face_pose.scale
            disp_c[flags] = np.linalg.solve(g[None] @ lin,
                                            disp_d[flags][..., None])[..., 0]

        gt = GroundTruthFrame(face_pose=face_pose, face_expr=face_expr,
                              hand_pose=hand_pose, displacement=disp_c,
                              contact_flags=flags)
        obs = render_frame(head, hand, gt, camera, frame_index=i)
        frames.append((gt, obs))

    return SyntheticSequence(scenario=scenario, seed=seed, head=head,
                             hand=hand, camera=camera, frames=frames,
                             config=cfg)


# ---------------------------------------------------------------------------
# track perturbation


@dataclass
class NoiseConfig:
    rot_std: float = 0.02          # rad, global rotations
    joint_std: float = 0.0         # rad, articulation
    trans_std: float = 0.005       # m
    scale_std: float = 0.0         # log-scale units
    expr_std: float = 0.0
    hand_depth_bias: float = 0.015  # m along the camera view axis
    rho: float = 0.8               # AR(1) correlation

    def validate(self):
        for name in ("rot_std", "joint_std", "trans_std", "scale_std",
                     "expr_std"):
            if getattr(self, name) < 0:
                raise SceneError(f"{name} must be non-negative")


def _ar1(rng, n, dim, std, rho):
    out = np.zeros((n, dim))
    if std == 0.0 or dim == 0:
        return out
    out[0] = std * rng.normal(size=dim)
    innov = std * np.sqrt(1.0 - rho * rho)
    for t in range(1, n):
        out[t] = rho * out[t - 1] + innov * rng.normal(size=dim)
    return out


def perturb_tracks(gt_frames, noise: NoiseConfig, seed: int,
                   camera: Camera | None = None,
                   optimize=DEFAULT_OPTIMIZE) -> list[FrameTrack]:
    """Noisy initial tracks mimicking independent per-model estimators:
    temporally correlated AR(1) noise plus a constant hand depth bias."""
    noise.validate()
    rng = np.random.default_rng(seed)
    n = len(gt_frames)
    if n == 0:
        return []
    g0 = gt_frames[0]
    n_theta_f = len(g0.face_pose.theta)
    n_theta_h = len(g0.hand_pose.theta)
    n_expr = len(g0.face_expr.psi)

    e_frot = _ar1(rng, n, 3, noise.rot_std, noise.rho)
    e_ftrans = _ar1(rng, n, 3, noise.trans_std, noise.rho)
    e_fscale = _ar1(rng, n, 1, noise.scale_std, noise.rho)
    e_ftheta = _ar1(rng, n, n_theta_f, noise.joint_std, noise.rho)
    e_expr = _ar1(rng, n, n_expr, noise.expr_std, noise.rho)
    e_hrot = _ar1(rng, n, 3, noise.rot_std, noise.rho)
    e_htrans = _ar1(rng, n, 3, noise.trans_std, noise.rho)
    e_hscale = _ar1(rng, n, 1, noise.scale_std, noise.rho)
    e_htheta = _ar1(rng, n, n_theta_h, noise.joint_std, noise.rho)

    view_axis = np.array([0.0, 0.0, 1.0])
    if camera is not None:
        view_axis = camera.rot[2]

    tracks = []
    for i, gt in enumerate(gt_frames):
        fp = gt.face_pose
        hp = gt.hand_pose
        tracks.append(FrameTrack(
            face_pose=PoseParams(
                theta=fp.theta + e_ftheta[i],
                global_rot=fp.global_rot + e_frot[i],
                global_trans=fp.global_trans + e_ftrans[i],
                scale=float(fp.scale * np.exp(e_fscale[i, 0]))),
            face_expr=ExpressionParams(psi=gt.face_expr.psi + e_expr[i]),
            hand_pose=PoseParams(
                theta=hp.theta + e_htheta[i],
                global_rot=hp.global_rot + e_hrot[i],
                global_trans=(hp.global_trans + e_htrans[i]
                              + noise.hand_depth_bias * view_axis),
                scale=float(hp.scale * np.exp(e_hscale[i, 0]))),
            optimize=frozenset(optimize)))
    return tracks


# ---------------------------------------------------------------------------
# dataset io


def _write_png(path, arr):
    Image.fromarray(arr).save(path, format="PNG")


def save_dataset(out_dir, seq: SyntheticSequence) -> None:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    mm.save_model(out / "head_model.json", seq.head)
    mm.save_model(out / "hand_model.json", seq.hand)

    gt_doc = {"version": DATASET_VERSION, "frames": []}
    disp_rows = []
    for i, (gt, obs) in enumerate(seq.frames):
        stem = out / "frames" / f"{i:04d}"
        _write_png(f"{stem}.rgb.png", np.round(obs.rgb * 255.0).astype(np.uint8))
        depth_units = np.round(obs.depth / DEPTH_QUANTUM)
        _write_png(f"{stem}.depth.png",
                   np.clip(depth_units, 0, 65535).astype(np.uint16))
        _write_png(f"{stem}.maskf.png", obs.mask_face * 255)
        _write_png(f"{stem}.maskh.png", obs.mask_hand * 255)
        lmk_doc = {
            "face": obs.lmk_face.tolist(),
            "face_occluded": obs.lmk_face_occluded.astype(int).tolist(),
            "hand": obs.lmk_hand.tolist(),
            "hand_occluded": obs.lmk_hand_occluded.astype(int).tolist(),
        }
        Path(f"{stem}.lmk.json").write_text(json.dumps(lmk_doc, sort_keys=True))

        gt_doc["frames"].append({
            "face": {"theta": gt.face_pose.theta.tolist(),
                     "rot": gt.face_pose.global_rot.tolist(),
                     "trans": gt.face_pose.global_trans.tolist(),
                     "scale": gt.face_pose.scale},
            "face_psi": gt.face_expr.psi.tolist(),
            "hand": {"theta": gt.hand_pose.theta.tolist(),
                     "rot": gt.hand_pose.global_rot.tolist(),
                     "trans": gt.hand_pose.global_trans.tolist(),
                     "scale": gt.hand_pose.scale},
            "contact_flags": base64.b64encode(
                np.packbits(gt.contact_flags).tobytes()).decode("ascii"),
        })
        disp_rows.append(gt.displacement.reshape(-1))

    from .defprior import DisplacementMatrix, save_displacements
    matrix = DisplacementMatrix(rows=np.stack(disp_rows),
                                n_verts=seq.head.n_verts)
    save_displacements(out / "gt_displacements", matrix)
    gt_doc["displacements"] = "gt_displacements.json"
    (out / "gt.json").write_text(json.dumps(gt_doc, sort_keys=True))
    meta = {"version": DATASET_VERSION, "scenario": seq.scenario,
            "seed": seq.seed, "n_frames": len(seq.frames),
            "camera": seq.camera.to_doc(),
            "image_size": seq.config.image_size}
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True))


@dataclass
class Dataset:
    root: Path
    scenario: str
    seed: int
    head: MorphableModel
    hand: MorphableModel
    camera: Camera
    gt_frames: list
    observations: list

    @property
    def n_frames(self) -> int:
        return len(self.gt_frames)


def load_dataset(root) -> Dataset:
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text())
    if meta.get("version") != DATASET_VERSION:
        raise SceneError(f"unsupported dataset version {meta.get('version')}")
    head = mm.load_model(root / "head_model.json")
    hand = mm.load_model(root / "hand_model.json")
    camera = Camera.from_doc(meta["camera"])
    gt_doc = json.loads((root / "gt.json").read_text())
    from .defprior import load_displacements
    disp = load_displacements(root / "gt_displacements")

    gt_frames = []
    observations = []
    for i, fr in enumerate(gt_doc["frames"]):
        flags = np.unpackbits(np.frombuffer(
            base64.b64decode(fr["contact_flags"]), dtype=np.uint8),
            count=head.n_verts).astype(bool)
        gt_frames.append(GroundTruthFrame(
            face_pose=PoseParams(theta=np.array(fr["face"]["theta"]),
                                 global_rot=np.array(fr["face"]["rot"]),
                                 global_trans=np.array(fr["face"]["trans"]),
                                 scale=float(fr["face"]["scale"])),
            face_expr=ExpressionParams(psi=np.array(fr["face_psi"])),
            hand_pose=PoseParams(theta=np.array(fr["hand"]["theta"]),
                                 global_rot=np.array(fr["hand"]["rot"]),
                                 global_trans=np.array(fr["hand"]["trans"]),
                                 scale=float(fr["hand"]["scale"])),
            displacement=disp.rows[i].reshape(-1, 3),
            contact_flags=flags))

        stem = root / "frames" / f"{i:04d}"
        rgb = np.asarray(Image.open(f"{stem}.rgb.png"), dtype=np.float64) / 255.0
        depth = np.asarray(Image.open(f"{stem}.depth.png"),
                           dtype=np.float64) * DEPTH_QUANTUM
        maskf = (np.asarray(Image.open(f"{stem}.maskf.png")) > 0).astype(np.uint8)
        maskh = (np.asarray(Image.open(f"{stem}.maskh.png")) > 0).astype(np.uint8)
        lmk = json.loads(Path(f"{stem}.lmk.json").read_text())
        observations.append(FrameObservation(
            rgb=rgb, depth=depth, mask_face=maskf, mask_hand=maskh,
            lmk_face=np.array(lmk["face"], dtype=np.float64).reshape(-1, 2),
            lmk_face_occluded=np.array(lmk["face_occluded"], dtype=bool),
            lmk_hand=np.array(lmk["hand"], dtype=np.float64).reshape(-1, 2),
            lmk_hand_occluded=np.array(lmk["hand_occluded"], dtype=bool),
            frame_index=i))
    return Dataset(root=root, scenario=meta["scenario"], seed=meta["seed"],
                   head=head, hand=hand, camera=camera,
                   gt_frames=gt_frames, observations=observations)
