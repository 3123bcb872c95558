"""Deformable neural implicit avatar.

Five MLP fields over a canonical head space: geometry (occupancy), point
deformation (expression blendshapes, pose correctives, skin weights),
surface rendering, contact-driven non-rigid blendshapes with per-frame
latent codes and contact coefficients, and a hand texture field. The hand
geometry itself is the tracked mesh, converted to an occupancy field.

All field evaluation happens in the head-local frame (the face track's
global rigid+scale removed), which keeps network inputs normalized and the
canonical space independent of head motion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import morphable as mm
from .autodiff import Tensor
from .checkpoint import load_tensors, save_tensors
from .meshes import MeshDistanceField
from .morphable import ExpressionParams, ModelError, MorphableModel, PoseParams
from .nn import AdamState, Mlp, adam_step, encoded_width, positional_encoding
from .tracks import FrameTrack


@dataclass
class AvatarConfig:
    n_k: int = 10                 # contact blendshape count (must match prior)
    latent_dim: int = 30
    pos_octaves: int = 6
    geometry_hidden: tuple = (64, 64, 64, 64)
    deformation_hidden: tuple = (64, 64, 64, 64)
    rendering_hidden: tuple = (64, 64, 64)
    nonrigid_hidden: tuple = (64, 64, 64)
    phi_hidden: tuple = (32, 32)
    hand_texture_hidden: tuple = (32, 32)
    hand_beta: float = 200.0      # occupancy sharpness, 1/m
    ray_samples: int = 64
    surface_tol: float = 1e-5
    max_refine: int = 32
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0


class AvatarModel:
    """Field weights plus per-frame latents for one reconstructed subject."""

    def __init__(self, head: MorphableModel, hand: MorphableModel,
                 n_frames: int, basis_hash: str = "",
                 config: AvatarConfig | None = None):
        self.config = config or AvatarConfig()
        cfg = self.config
        self.head = head
        self.hand = hand
        self.basis_hash = basis_hash
        self.n_frames = n_frames
        n_e, n_j = head.n_expr, head.n_joints
        enc3 = encoded_width(3, cfg.pos_octaves)
        rng = np.random.default_rng(cfg.seed)

        self.f_geo = Mlp([enc3, *cfg.geometry_hidden, 1],
                         out_activation="sigmoid", name="geo", rng=rng)
        def_out = n_e * 3 + n_j * 9 * 3 + n_j
        self.f_def = Mlp([enc3 + 3 * n_j + n_e, *cfg.deformation_hidden, def_out],
                         name="def", rng=rng)
        self.f_rgb = Mlp([enc3 + 3 + 3 * n_j + n_e, *cfg.rendering_hidden, 3],
                         out_activation="sigmoid", name="rgb", rng=rng)
        self.f_nonrigid = Mlp([enc3 + cfg.latent_dim, *cfg.nonrigid_hidden,
                               cfg.n_k * 3], name="nonrigid", rng=rng)
        self.f_phi = Mlp([cfg.latent_dim, *cfg.phi_hidden, cfg.n_k],
                         name="phi", rng=rng)
        self.f_handtex = Mlp([enc3 + 3, *cfg.hand_texture_hidden, 3],
                             out_activation="sigmoid", name="handtex", rng=rng)
        # contact deformation starts exactly off
        self.f_nonrigid.zero_output_layer()
        self.f_phi.zero_output_layer()
        # start the deformation head near the identity mapping
        self.f_def.zero_output_layer()
        self.latents = np.zeros((n_frames, cfg.latent_dim))

        self._def_splits = (n_e * 3, n_e * 3 + n_j * 9 * 3)

    @property
    def mlps(self):
        return (self.f_geo, self.f_def, self.f_rgb, self.f_nonrigid,
                self.f_phi, self.f_handtex)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for mlp in self.mlps:
            out.update(mlp.params())
        out["latents"] = self.latents
        return out

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        for mlp in self.mlps:
            mlp.load_params(params)
        self.latents = np.asarray(params["latents"], dtype=np.float64).copy()

    # -- encodings ---------------------------------------------------------

    def encode(self, x):
        return positional_encoding(x, self.config.pos_octaves)

    # -- fields, numpy fast path --------------------------------------------

    def occupancy(self, x_c: np.ndarray) -> np.ndarray:
        return self.f_geo(self.encode(np.atleast_2d(x_c)))[:, 0]

    def centered_occupancy(self, x_c: np.ndarray) -> np.ndarray:
        """s = occupancy - 0.5: positive inside, zero on the surface."""
        return self.occupancy(x_c) - 0.5

    def deformation_attrs(self, x_d: np.ndarray, theta: np.ndarray,
                          psi: np.ndarray):
        """Predicted per-point expression vectors, pose correctives, and
        softmax-normalized skin weights at deformed-space points."""
        x_d = np.atleast_2d(x_d)
        n = len(x_d)
        inp = np.concatenate([self.encode(x_d),
                              np.tile(theta, (n, 1)), np.tile(psi, (n, 1))],
                             axis=1)
        raw = self.f_def(inp)
        e_flat, p_end = self._def_splits
        n_e, n_j = self.head.n_expr, self.head.n_joints
        e = raw[:, :e_flat].reshape(n, n_e, 3)
        p = raw[:, e_flat:p_end].reshape(n, n_j, 9, 3)
        w_raw = raw[:, p_end:]
        w_shift = w_raw - w_raw.max(axis=1, keepdims=True)
        w = np.exp(w_shift)
        w /= w.sum(axis=1, keepdims=True)
        return e, p, w

    def contact_coeffs(self, latent: np.ndarray) -> np.ndarray:
        return self.f_phi(latent.reshape(1, -1))[0]

    def nonrigid_blendshapes(self, x: np.ndarray, latent: np.ndarray):
        x = np.atleast_2d(x)
        n = len(x)
        inp = np.concatenate([self.encode(x), np.tile(latent, (n, 1))], axis=1)
        return self.f_nonrigid(inp).reshape(n, self.config.n_k, 3)


@dataclass
class FrameContext:
    """Everything frame-specific needed to evaluate the avatar: face pose
    conditioning, constant skinning transforms, the local-frame hand field,
    and the frame's latent code."""

    frame: int
    theta: np.ndarray
    psi: np.ndarray
    joint_transforms: np.ndarray      # (n_j, 4, 4)
    pose_feat_flat: np.ndarray        # (n_j * 9,)
    face_pose: PoseParams
    hand_pose: PoseParams
    hand_verts_local: np.ndarray
    hand_field: MeshDistanceField
    latent: np.ndarray

    def world_to_local(self, pts: np.ndarray) -> np.ndarray:
        return mm.global_transform_inverse(self.face_pose, pts)

    def local_to_world(self, pts: np.ndarray) -> np.ndarray:
        return mm.global_transform(self.face_pose, pts)


def build_frame_context(avatar: AvatarModel, track: FrameTrack,
                        frame: int) -> FrameContext:
    head, hand = avatar.head, avatar.hand
    theta = track.face_pose.theta
    psi = track.face_expr.psi
    a = mm.joint_transforms(head, track.face_pose, track.face_expr)
    feat = mm.pose_feature(head, track.face_pose).reshape(-1)
    hand_world = mm.lbs_forward(hand, track.hand_pose,
                                ExpressionParams.zeros(hand.n_expr))
    hand_local = mm.global_transform_inverse(track.face_pose, hand_world)
    latent = avatar.latents[frame] if frame < len(avatar.latents) else \
        np.zeros(avatar.config.latent_dim)
    return FrameContext(
        frame=frame, theta=theta, psi=psi, joint_transforms=a,
        pose_feat_flat=feat, face_pose=track.face_pose,
        hand_pose=track.hand_pose, hand_verts_local=hand_local,
        hand_field=MeshDistanceField(hand_local, hand.faces), latent=latent)


# ---------------------------------------------------------------------------
# canonical mapping (numpy and tape paths)


def canonical_map(avatar: AvatarModel, ctx: FrameContext, x_d: np.ndarray,
                  include_nonrigid: bool = True):
    """Map deformed-space (head-local) points to canonical space.

    Returns (x_c, info) where info carries the intermediate predictions:
    E, P, W, the pre-contact canonical point, the contact blendshapes N at
    that point, and the frame's contact coefficients phi.
    """
    x_d = np.atleast_2d(x_d)
    e, p, w = avatar.deformation_attrs(x_d, ctx.theta, ctx.psi)
    m = np.einsum("nj,jab->nab", w, ctx.joint_transforms)
    lin = m[:, :3, :3]
    det = np.linalg.det(lin)
    if np.any(np.abs(det) < 1e-12):
        raise ModelError("singular blended transform")
    undone = np.linalg.solve(lin, (x_d - m[:, :3, 3])[..., None])[..., 0]
    b_e = np.einsum("e,nek->nk", ctx.psi, e) if avatar.head.n_expr else 0.0
    b_p = np.einsum("l,nlk->nk", ctx.pose_feat_flat,
                    p.reshape(len(x_d), -1, 3))
    x_pre = undone - b_e - b_p
    if include_nonrigid:
        n_field = avatar.nonrigid_blendshapes(x_pre, ctx.latent)
        phi = avatar.contact_coeffs(ctx.latent)
        b_n = np.einsum("k,nkj->nj", phi, n_field)
        x_c = x_pre - b_n
    else:
        n_field = np.zeros((len(x_d), avatar.config.n_k, 3))
        phi = np.zeros(avatar.config.n_k)
        x_c = x_pre
    info = {"E": e, "P": p, "W": w, "x_pre": x_pre, "N": n_field, "phi": phi}
    return x_c, info


def _inv3_apply(m: Tensor, rhs: Tensor) -> Tensor:
    """Solve (N, 3, 3) systems against (N, 3) right-hand sides on the tape
    via the adjugate; raises on singular blends."""
    n = m.shape[0]

    def elem(i, j):
        return ad.reshape(ad.narrow(ad.narrow(m, 1, i, 1), 2, j, 1), (n,))

    a, b, c = elem(0, 0), elem(0, 1), elem(0, 2)
    d, e, f = elem(1, 0), elem(1, 1), elem(1, 2)
    g, h, i = elem(2, 0), elem(2, 1), elem(2, 2)

    co00 = ad.sub(ad.mul(e, i), ad.mul(f, h))
    co01 = ad.sub(ad.mul(f, g), ad.mul(d, i))
    co02 = ad.sub(ad.mul(d, h), ad.mul(e, g))
    det = ad.add(ad.add(ad.mul(a, co00), ad.mul(b, co01)), ad.mul(c, co02))
    if np.any(np.abs(det.data) < 1e-12):
        raise ModelError("singular blended transform")

    co10 = ad.sub(ad.mul(c, h), ad.mul(b, i))
    co11 = ad.sub(ad.mul(a, i), ad.mul(c, g))
    co12 = ad.sub(ad.mul(b, g), ad.mul(a, h))
    co20 = ad.sub(ad.mul(b, f), ad.mul(c, e))
    co21 = ad.sub(ad.mul(c, d), ad.mul(a, f))
    co22 = ad.sub(ad.mul(a, e), ad.mul(b, d))

    r0 = ad.reshape(ad.narrow(rhs, 1, 0, 1), (n,))
    r1 = ad.reshape(ad.narrow(rhs, 1, 1, 1), (n,))
    r2 = ad.reshape(ad.narrow(rhs, 1, 2, 1), (n,))

    y0 = ad.add(ad.add(ad.mul(co00, r0), ad.mul(co10, r1)), ad.mul(co20, r2))
    y1 = ad.add(ad.add(ad.mul(co01, r0), ad.mul(co11, r1)), ad.mul(co21, r2))
    y2 = ad.add(ad.add(ad.mul(co02, r0), ad.mul(co12, r1)), ad.mul(co22, r2))
    out = ad.concat([ad.reshape(ad.div(y0, det), (n, 1)),
                     ad.reshape(ad.div(y1, det), (n, 1)),
                     ad.reshape(ad.div(y2, det), (n, 1))], axis=1)
    return out


def canonical_map_t(avatar: AvatarModel, ctx: FrameContext, x_d,
                    params: dict | None = None, latent=None,
                    include_nonrigid: bool = True):
    """Tape version of `canonical_map`. `x_d` may be a Tensor (for normals)
    or an array; `params` overrides network weights with tape leaves;
    `latent` overrides the frame latent (a Tensor row for training)."""
    n_e, n_j = avatar.head.n_expr, avatar.head.n_joints
    x_t = x_d if isinstance(x_d, Tensor) else Tensor(np.atleast_2d(x_d))
    n = x_t.shape[0]

    enc = positional_encoding(x_t, avatar.config.pos_octaves)
    cond = np.concatenate([np.tile(ctx.theta, (n, 1)),
                           np.tile(ctx.psi, (n, 1))], axis=1)
    raw = avatar.f_def(ad.concat([enc, Tensor(cond)], axis=1), params=params)
    e_flat, p_end = avatar._def_splits
    e = ad.reshape(ad.narrow(raw, 1, 0, e_flat), (n, n_e, 3))
    p = ad.reshape(ad.narrow(raw, 1, e_flat, p_end - e_flat), (n, n_j * 9, 3))
    w = ad.softmax(ad.narrow(raw, 1, p_end, n_j), axis=1)

    a_flat = ctx.joint_transforms.reshape(n_j, 16)
    m = ad.reshape(ad.matmul(w, a_flat), (n, 4, 4))
    lin = ad.narrow(ad.narrow(m, 1, 0, 3), 2, 0, 3)
    t_col = ad.reshape(ad.narrow(ad.narrow(m, 1, 0, 3), 2, 3, 1), (n, 3))
    undone = _inv3_apply(lin, ad.sub(x_t, t_col))

    if n_e:
        b_e = ad.tsum(ad.mul(e, ctx.psi[None, :, None]), axis=1)
        x_pre = ad.sub(undone, b_e)
    else:
        x_pre = undone
    b_p = ad.tsum(ad.mul(p, ctx.pose_feat_flat[None, :, None]), axis=1)
    x_pre = ad.sub(x_pre, b_p)

    info = {"E": e, "P": p, "W": w, "x_pre": x_pre}
    if not include_nonrigid:
        info["N"] = None
        info["phi"] = None
        return x_pre, info

    lat = latent if latent is not None else Tensor(ctx.latent)
    if lat.data.ndim == 1:
        lat_mat = ad.reshape(lat, (1, -1))
    else:
        lat_mat = lat
    enc_pre = positional_encoding(x_pre, avatar.config.pos_octaves)
    lat_tiled = ad.gather_rows(lat_mat, np.zeros(n, dtype=int))
    n_raw = avatar.f_nonrigid(ad.concat([enc_pre, lat_tiled], axis=1),
                              params=params)
    n_field = ad.reshape(n_raw, (n, avatar.config.n_k, 3))
    phi = ad.reshape(avatar.f_phi(lat_mat, params=params),
                     (avatar.config.n_k,))
    b_n = ad.tsum(ad.mul(n_field, ad.reshape(phi, (1, -1, 1))), axis=1)
    x_c = ad.sub(x_pre, b_n)
    info["N"] = n_field
    info["phi"] = phi
    return x_c, info


def centered_occupancy_t(avatar: AvatarModel, x_c: Tensor,
                         params: dict | None = None) -> Tensor:
    enc = positional_encoding(x_c, avatar.config.pos_octaves)
    occ = avatar.f_geo(enc, params=params)
    return ad.reshape(ad.sub(occ, 0.5), (x_c.shape[0],))


# ---------------------------------------------------------------------------
# ray-surface intersection


@dataclass
class SurfaceHit:
    ray_id: int
    kind: str                    # "face" | "hand" | "none"
    t: float = np.nan
    x_d: np.ndarray | None = None     # head-local deformed hit point
    x_c: np.ndarray | None = None     # canonical hit point (face hits)
    normal: np.ndarray | None = None
    occupancy: float = np.nan
    converged: bool = True
    min_abs_s: float = np.inf         # over the sample sweep (mask proxy)
    min_abs_s_t: float = np.nan


def _sphere_ray_window(origins, dirs, center, radius):
    """Entry/exit ray parameters against a bounding sphere; NaN on miss."""
    oc = origins - center
    b = np.einsum("rk,rk->r", oc, dirs)
    c = np.einsum("rk,rk->r", oc, oc) - radius * radius
    disc = b * b - c
    ok = disc >= 0.0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = np.where(ok, -b - sq, np.nan)
    t1 = np.where(ok, -b + sq, np.nan)
    return t0, t1, ok & (t1 > 0.0)


def ray_surface_intersect(field_fn, origins, dirs, near, far,
                          n_samples: int = 64, tol: float = 1e-5,
                          max_refine: int = 32):
    """First zero crossing of a centered occupancy field along each ray.

    `field_fn` maps (N, 3) points to centered occupancy (positive inside).
    `near`/`far` are per-ray arrays. Samples are stratified midpoints;
    the crossing bracket is polished by bisection with a secant candidate
    to |s| < tol. Returns per-ray dicts with hit data.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    r = len(origins)
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (r,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (r,))
    span = far - near
    valid = span > 0.0

    frac = (np.arange(n_samples) + 0.5) / n_samples
    ts = near[:, None] + span[:, None] * frac[None, :]
    pts = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    s = np.full((r, n_samples), -np.inf)
    if valid.any():
        s[valid] = field_fn(pts[valid].reshape(-1, 3)).reshape(-1, n_samples)

    out = []
    abs_s = np.abs(s)
    min_idx = np.argmin(abs_s, axis=1)
    crossing = (s[:, :-1] < 0.0) & (s[:, 1:] >= 0.0)
    for ray in range(r):
        hit = {"hit": False, "t": np.nan, "s": np.nan, "converged": True,
               "min_abs_s": float(abs_s[ray, min_idx[ray]]) if valid[ray] else np.inf,
               "min_abs_s_t": float(ts[ray, min_idx[ray]]) if valid[ray] else np.nan}
        if not valid[ray]:
            out.append(hit)
            continue
        idx = np.nonzero(crossing[ray])[0]
        if len(idx) == 0:
            out.append(hit)
            continue
        i = int(idx[0])
        t_lo, t_hi = ts[ray, i], ts[ray, i + 1]
        s_lo, s_hi = s[ray, i], s[ray, i + 1]
        t_mid, s_mid = t_hi, s_hi
        converged = False
        for _ in range(max_refine):
            if abs(s_mid) < tol:
                converged = True
                break
            # secant candidate, fall back to bisection if it leaves bracket
            denom = s_hi - s_lo
            t_sec = t_lo - s_lo * (t_hi - t_lo) / denom if denom != 0 else t_lo
            t_mid = t_sec if t_lo < t_sec < t_hi else 0.5 * (t_lo + t_hi)
            s_mid = float(field_fn((origins[ray] + t_mid * dirs[ray])[None])[0])
            if s_mid < 0.0:
                t_lo, s_lo = t_mid, s_mid
            else:
                t_hi, s_hi = t_mid, s_mid
        hit.update(hit=True, t=float(t_mid), s=float(s_mid),
                   converged=converged)
        out.append(hit)
    return out


def intersect_frame(avatar: AvatarModel, ctx: FrameContext, origins, dirs,
                    which: str = "joint"):
    """Intersect rays (head-local frame) against the face field, the hand
    occupancy field, or both (`joint` keeps the nearer hit)."""
    cfg = avatar.config
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    r = len(origins)

    lo = avatar.head.template.min(axis=0)
    hi = avatar.head.template.max(axis=0)
    if which in ("hand", "joint"):
        hlo, hhi = ctx.hand_field.bounds
        lo = np.minimum(lo, hlo)
        hi = np.maximum(hi, hhi)
    center = 0.5 * (lo + hi)
    radius = 0.5 * float(np.linalg.norm(hi - lo)) + 0.02
    t0, t1, ok = _sphere_ray_window(origins, dirs, center, radius)
    near = np.where(ok, np.maximum(t0, 1e-4), 0.0)
    far = np.where(ok, t1, 0.0)

    face_hits = hand_hits = None
    if which in ("face", "joint"):
        def face_field(p):
            x_c, _ = canonical_map(avatar, ctx, p)
            return avatar.centered_occupancy(x_c)

        face_hits = ray_surface_intersect(face_field, origins, dirs, near, far,
                                          cfg.ray_samples, cfg.surface_tol,
                                          cfg.max_refine)
    if which in ("hand", "joint"):
        def hand_field(p):
            return hand_occupancy(ctx, p, cfg.hand_beta) - 0.5

        hand_hits = ray_surface_intersect(hand_field, origins, dirs, near, far,
                                          cfg.ray_samples, cfg.surface_tol,
                                          cfg.max_refine)

    hits = []
    for i in range(r):
        fh = face_hits[i] if face_hits else None
        hh = hand_hits[i] if hand_hits else None
        take_face = fh is not None and fh["hit"] and \
            (hh is None or not hh["hit"] or fh["t"] <= hh["t"])
        take_hand = hh is not None and hh["hit"] and not take_face
        base = SurfaceHit(ray_id=i, kind="none")
        if fh is not None:
            base.min_abs_s = fh["min_abs_s"]
            base.min_abs_s_t = fh["min_abs_s_t"]
        if take_face:
            x_d = origins[i] + fh["t"] * dirs[i]
            x_c, _ = canonical_map(avatar, ctx, x_d)
            base.kind = "face"
            base.t = fh["t"]
            base.x_d = x_d
            base.x_c = x_c[0]
            base.occupancy = fh["s"] + 0.5
            base.converged = fh["converged"]
        elif take_hand:
            x_d = origins[i] + hh["t"] * dirs[i]
            base.kind = "hand"
            base.t = hh["t"]
            base.x_d = x_d
            base.occupancy = hh["s"] + 0.5
            base.converged = hh["converged"]
        hits.append(base)
    return hits


def surface_normal(avatar: AvatarModel, ctx: FrameContext,
                   x_d: np.ndarray) -> np.ndarray:
    """Deformed-space unit normals at face surface points: the negated,
    normalized gradient of s(canonical_map(x_d)) w.r.t. x_d (s decreases
    outward)."""
    x_d = np.atleast_2d(x_d)
    tape = ad.Tape()
    leaf = tape.leaf(x_d, "x_d")
    x_c, _ = canonical_map_t(avatar, ctx, leaf)
    s = centered_occupancy_t(avatar, x_c)
    tape.backward(ad.tsum(s))
    grad = tape.grad(leaf)
    norm = np.linalg.norm(grad, axis=1)
    if np.any(norm < 1e-9):
        raise ModelError("degenerate normal (zero occupancy gradient)")
    return -grad / norm[:, None]


# ---------------------------------------------------------------------------
# hand field


def hand_occupancy(ctx: FrameContext, x: np.ndarray,
                   beta: float = 200.0) -> np.ndarray:
    """sigmoid(-beta * signed_distance) against the posed hand mesh."""
    sd = ctx.hand_field.signed_distance(np.atleast_2d(x))
    return 1.0 / (1.0 + np.exp(np.clip(beta * sd, -500, 500)))


def hand_normal(ctx: FrameContext, x: np.ndarray) -> np.ndarray:
    """Barycentric interpolation of vertex normals on the nearest triangle."""
    return ctx.hand_field.interpolated_normal(np.atleast_2d(x))


def hand_canonical(ctx: FrameContext, hand_model: MorphableModel,
                   x: np.ndarray) -> np.ndarray:
    """Pull posed hand-surface points back to the hand template via nearest
    triangle barycentrics (texture coordinates for the hand field)."""
    _, fid, bary = ctx.hand_field.nearest(np.atleast_2d(x))
    tris = hand_model.template[hand_model.faces[fid]]
    return np.einsum("pk,pkj->pj", bary, tris)


# ---------------------------------------------------------------------------
# rendering


def render_rays(avatar: AvatarModel, ctx: FrameContext, origins_world,
                dirs_world):
    """Joint render of world-space rays. Returns colors (N, 3) and hits."""
    cfg = avatar.config
    o_local = ctx.world_to_local(np.atleast_2d(origins_world))
    scale = ctx.face_pose.scale
    r_inv = mm.rodrigues(ctx.face_pose.global_rot).T
    d_local = (np.atleast_2d(dirs_world) @ r_inv.T)
    d_norm = np.linalg.norm(d_local, axis=1)
    d_local = d_local / d_norm[:, None]

    hits = intersect_frame(avatar, ctx, o_local, d_local, which="joint")
    colors = np.tile(np.asarray(cfg.background), (len(hits), 1))
    face_ids = [h.ray_id for h in hits if h.kind == "face"]
    hand_ids = [h.ray_id for h in hits if h.kind == "hand"]
    if face_ids:
        x_d = np.stack([hits[i].x_d for i in face_ids])
        x_c = np.stack([hits[i].x_c for i in face_ids])
        normals = surface_normal(avatar, ctx, x_d)
        for i, n in zip(face_ids, normals):
            hits[i].normal = n
        inp = np.concatenate([avatar.encode(x_c), normals,
                              np.tile(ctx.theta, (len(face_ids), 1)),
                              np.tile(ctx.psi, (len(face_ids), 1))], axis=1)
        colors[face_ids] = avatar.f_rgb(inp)
    if hand_ids:
        x_d = np.stack([hits[i].x_d for i in hand_ids])
        normals = hand_normal(ctx, x_d)
        for i, n in zip(hand_ids, normals):
            hits[i].normal = n
        x_ct = hand_canonical(ctx, avatar.hand, x_d)
        inp = np.concatenate([avatar.encode(x_ct), normals], axis=1)
        colors[hand_ids] = avatar.f_handtex(inp)
    return colors, hits


def render_image(avatar: AvatarModel, ctx: FrameContext, camera,
                 chunk: int = 2048):
    """Full-frame render: color image, hit-kind map, and normal map."""
    h, w = camera.height, camera.width
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    rows = rows.ravel()
    cols = cols.ravel()
    img = np.zeros((h * w, 3))
    kinds = np.zeros(h * w, dtype=np.int8)
    normal_map = np.zeros((h * w, 3))
    for s in range(0, h * w, chunk):
        sl = slice(s, min(s + chunk, h * w))
        origins, dirs, _ = camera.pixel_rays(rows[sl], cols[sl])
        colors, hits = render_rays(avatar, ctx, origins, dirs)
        img[sl] = colors
        for j, hit in enumerate(hits):
            if hit.kind == "face":
                kinds[s + j] = 1
            elif hit.kind == "hand":
                kinds[s + j] = 2
            if hit.normal is not None:
                normal_map[s + j] = hit.normal
    return (img.reshape(h, w, 3), kinds.reshape(h, w),
            normal_map.reshape(h, w, 3))


# ---------------------------------------------------------------------------
# geometry pretraining


def pretrain_geometry(avatar: AvatarModel, radius: float | None = None,
                      center=None, steps: int = 600, batch: int = 512,
                      lr: float = 1e-3, sharpness: float = 60.0,
                      seed: int = 0):
    """Regress the geometry field to a sphere occupancy before main training
    so root finding starts from a sane surface."""
    tmpl = avatar.head.template
    if center is None:
        center = tmpl.mean(axis=0)
    if radius is None:
        radius = 0.9 * float(np.linalg.norm(tmpl - center, axis=1).mean())
    rng = np.random.default_rng(seed)
    box = 1.8 * float(np.abs(tmpl - center).max())
    adam = AdamState(lr=lr)
    geo_params = avatar.f_geo.params()
    last = np.inf
    for _ in range(steps):
        pts = center + rng.uniform(-box, box, size=(batch, 3))
        target = 1.0 / (1.0 + np.exp(
            -sharpness * (radius - np.linalg.norm(pts - center, axis=1))))
        tape = ad.Tape()
        leaves = {k: tape.leaf(v, k) for k, v in geo_params.items()}
        occ = avatar.f_geo(positional_encoding(Tensor(pts),
                                               avatar.config.pos_octaves),
                           params=leaves)
        err = ad.sub(ad.reshape(occ, (batch,)), target)
        loss = ad.tmean(ad.square(err))
        tape.backward(loss)
        grads = {k: tape.grad(v) for k, v in leaves.items()}
        adam_step(adam, geo_params, grads)
        last = float(loss.data)
    avatar.f_geo.load_params(geo_params)
    return last


# ---------------------------------------------------------------------------
# checkpointing


def save_avatar(path, avatar: AvatarModel) -> None:
    cfg = avatar.config
    meta = {
        "kind": "avatar",
        "basis_hash": avatar.basis_hash,
        "n_frames": avatar.n_frames,
        "config": {
            "n_k": cfg.n_k, "latent_dim": cfg.latent_dim,
            "pos_octaves": cfg.pos_octaves,
            "geometry_hidden": list(cfg.geometry_hidden),
            "deformation_hidden": list(cfg.deformation_hidden),
            "rendering_hidden": list(cfg.rendering_hidden),
            "nonrigid_hidden": list(cfg.nonrigid_hidden),
            "phi_hidden": list(cfg.phi_hidden),
            "hand_texture_hidden": list(cfg.hand_texture_hidden),
            "hand_beta": cfg.hand_beta, "ray_samples": cfg.ray_samples,
            "surface_tol": cfg.surface_tol, "max_refine": cfg.max_refine,
            "background": list(cfg.background), "seed": cfg.seed,
        },
    }
    save_tensors(path, avatar.params(), meta)


def load_avatar(path, head: MorphableModel, hand: MorphableModel) -> AvatarModel:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "avatar":
        raise ModelError(f"{path} is not an avatar checkpoint")
    c = meta["config"]
    cfg = AvatarConfig(
        n_k=c["n_k"], latent_dim=c["latent_dim"], pos_octaves=c["pos_octaves"],
        geometry_hidden=tuple(c["geometry_hidden"]),
        deformation_hidden=tuple(c["deformation_hidden"]),
        rendering_hidden=tuple(c["rendering_hidden"]),
        nonrigid_hidden=tuple(c["nonrigid_hidden"]),
        phi_hidden=tuple(c["phi_hidden"]),
        hand_texture_hidden=tuple(c["hand_texture_hidden"]),
        hand_beta=c["hand_beta"], ray_samples=c["ray_samples"],
        surface_tol=c["surface_tol"], max_refine=c["max_refine"],
        background=tuple(c["background"]), seed=c["seed"])
    avatar = AvatarModel(head, hand, n_frames=meta["n_frames"],
                         basis_hash=meta.get("basis_hash", ""), config=cfg)
    avatar.load_params(tensors)
    return avatar
