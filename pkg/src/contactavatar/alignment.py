"""Stage-1 preprocessing: jointly refines face and hand global pose, scale,
and translation over a sequence by minimizing landmark reprojection, depth
ordering, contact regularization, and temporal smoothness.

Losses accept either numpy arrays or autodiff Tensors for the quantities
they differentiate through, so the same code serves value tests, gradient
checks, and the optimizer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from . import morphable as mm
from .autodiff import Tensor
from .meshes import MeshDistanceField, aabb_overlap, ray_triangle_intersect
from .morphable import ExpressionParams, PoseParams
from .nn import AdamState, adam_step
from .tracks import FrameTrack

log = logging.getLogger(__name__)

# re-exported track type: alignment owns the contract, tracks.py the codec
__all__ = ["FrameTrack", "DepthSamplePair", "ContactPairSet",
           "depth_order_loss", "contact_reg_loss", "landmark_loss",
           "smoothness_loss", "align_sequence", "AlignConfig", "AlignWeights"]


@dataclass
class DepthSamplePair:
    """One (hand pixel, face pixel) sample with estimated depths from the
    observation and rendered depths from the posed meshes."""

    hand_pixel: tuple
    face_pixel: tuple
    est_hand: float
    est_face: float
    rend_hand: float = np.nan
    rend_face: float = np.nan


@dataclass
class ContactPairSet:
    """Fingertip vertex ids and, per fingertip, its K nearest contact-prone
    face vertex ids. Rebuilt every outer iteration."""

    fingertip_ids: np.ndarray        # (N,)
    face_ids: np.ndarray             # (N, K)

    def __post_init__(self):
        if self.face_ids.ndim != 2 or self.face_ids.shape[1] < 1:
            raise ValueError("K must be >= 1")


def _maybe_value(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def depth_order_loss(est_hand, est_face, rend_hand, rend_face,
                     sign_margin: float = 0.0):
    """Hinge on rendered depth ordering against the estimated ordering.

    mean over pairs of max(0, -sign(p_h - p_f) * (p^_h - p^_f)); sign(0) is 0
    so exactly-tied estimates contribute nothing. `sign_margin` widens that
    dead zone to absorb depth-map quantization. The sign factor is constant,
    so the loss is differentiable w.r.t. the rendered depths.
    """
    eh = np.asarray(est_hand, dtype=np.float64)
    ef = np.asarray(est_face, dtype=np.float64)
    if eh.size == 0:
        log.warning("depth_order_loss: empty pair list")
        return Tensor(0.0) if isinstance(rend_hand, Tensor) else 0.0
    diff = eh - ef
    sign = np.sign(diff)
    sign[np.abs(diff) <= sign_margin] = 0.0
    if isinstance(rend_hand, Tensor) or isinstance(rend_face, Tensor):
        delta = ad.sub(rend_hand, rend_face)
        return ad.tmean(ad.relu(ad.mul(delta, -sign)))
    delta = np.asarray(rend_hand) - np.asarray(rend_face)
    return float(np.mean(np.maximum(0.0, -sign * delta)))


def contact_reg_loss(fingertip_pts, face_pts, activation_radius: float = 0.03):
    """Mean squared fingertip-to-face-vertex distance over active pairs.

    `fingertip_pts`: (N, K, 3) fingertip positions repeated per face target
    (or (N, 3) with K=1); `face_pts`: matching face vertex positions. Pairs
    farther than `activation_radius` are dropped before averaging; if all
    are dropped the loss is 0. Pass `activation_radius=None` to disable
    gating.
    """
    fv = _maybe_value(fingertip_pts)
    uv = _maybe_value(face_pts)
    if fv.ndim == 2:
        fv = fv[:, None, :]
        uv = uv[:, None, :]
    d2 = ((fv - uv) ** 2).sum(axis=-1)
    if activation_radius is None:
        keep = np.ones(d2.shape, dtype=bool)
    else:
        keep = d2 <= activation_radius * activation_radius
    n_keep = int(keep.sum())
    tensor_mode = isinstance(fingertip_pts, Tensor) or isinstance(face_pts, Tensor)
    if n_keep == 0:
        return Tensor(0.0) if tensor_mode else 0.0
    if tensor_mode:
        diff = ad.sub(fingertip_pts, face_pts)
        d2_t = ad.tsum(ad.square(diff), axis=-1)
        if d2_t.data.ndim == 1:
            d2_t = ad.reshape(d2_t, (-1, 1))
        mask = keep.reshape(d2_t.shape).astype(np.float64) / n_keep
        return ad.tsum(ad.mul(d2_t, mask))
    return float(d2[keep].mean())


def landmark_loss(projected, observed, occluded=None):
    """Mean squared pixel distance over visible landmarks."""
    obs = np.asarray(observed, dtype=np.float64)
    if occluded is None:
        occluded = np.zeros(len(obs), dtype=bool)
    visible = ~np.asarray(occluded, dtype=bool)
    if not visible.any():
        log.warning("landmark_loss: all landmarks occluded")
        return Tensor(0.0) if isinstance(projected, Tensor) else 0.0
    if isinstance(projected, Tensor):
        diff = ad.sub(projected, obs)
        sq = ad.tsum(ad.square(diff), axis=1)
        w = visible.astype(np.float64) / visible.sum()
        return ad.tsum(ad.mul(sq, w))
    diff = np.asarray(projected) - obs
    return float((diff[visible] ** 2).sum(axis=1).mean())


def smoothness_loss(param_seq, channel_weights=None):
    """Mean over consecutive-frame transitions of the weighted squared
    parameter difference. (F, C) input; 0 for a single frame."""
    vals = _maybe_value(param_seq)
    f, c = vals.shape
    if f < 2:
        return Tensor(0.0) if isinstance(param_seq, Tensor) else 0.0
    w = np.ones(c) if channel_weights is None else np.asarray(channel_weights)
    if isinstance(param_seq, Tensor):
        a = ad.narrow(param_seq, 0, 1, f - 1)
        b = ad.narrow(param_seq, 0, 0, f - 1)
        sq = ad.square(ad.sub(a, b))
        return ad.mul(ad.tsum(ad.mul(sq, w)), 1.0 / (f - 1))
    d = np.diff(vals, axis=0)
    return float(((d * d) * w).sum() / (f - 1))


# ---------------------------------------------------------------------------
# differentiable global-rigid kinematics

_E_SKEW = np.zeros((3, 3, 3))
_E_SKEW[0, 1, 2], _E_SKEW[0, 2, 1] = -1.0, 1.0
_E_SKEW[1, 0, 2], _E_SKEW[1, 2, 0] = 1.0, -1.0
_E_SKEW[2, 0, 1], _E_SKEW[2, 1, 0] = -1.0, 1.0


def rodrigues_t(aa: Tensor) -> Tensor:
    """Axis-angle (F, 3) to rotation matrices (F, 3, 3) on the tape."""
    f = aa.shape[0]
    theta2 = ad.tsum(ad.square(aa), axis=1)                    # (F,)
    theta = ad.sqrt(ad.add(theta2, 1e-40))
    s = ad.div(ad.sin(theta), theta)
    c = ad.div(ad.sub(1.0, ad.cos(theta)), ad.add(theta2, 1e-40))
    k = None
    for comp in range(3):
        a_c = ad.reshape(ad.narrow(aa, 1, comp, 1), (f, 1, 1))
        term = ad.mul(a_c, _E_SKEW[comp][None])                # (F, 3, 3)
        k = term if k is None else ad.add(k, term)
    k2 = ad.matmul(k, k)
    s3 = ad.reshape(s, (f, 1, 1))
    c3 = ad.reshape(c, (f, 1, 1))
    eye = np.broadcast_to(np.eye(3), (f, 3, 3)).copy()
    return ad.add(ad.add(eye, ad.mul(s3, k)), ad.mul(c3, k2))


@dataclass
class _RigidLeaves:
    """Per-model optimizable global channels on a tape (or constants)."""

    rot: Tensor      # (F, 3)
    trans: Tensor    # (F, 3)
    logscale: Tensor  # (F, 1)
    rotmats: Tensor = None   # (F, 3, 3), filled lazily

    def ensure_rotmats(self):
        if self.rotmats is None:
            self.rotmats = rodrigues_t(self.rot)
        return self.rotmats


def _posed_points(leaves: _RigidLeaves, frame_idx: np.ndarray,
                  pre_points: np.ndarray) -> Tensor:
    """Apply per-frame global rigid+scale to pre-skinned constant points."""
    n = len(frame_idx)
    r = leaves.ensure_rotmats()
    rg = ad.reshape(ad.gather_rows(ad.reshape(r, (-1, 9)), frame_idx), (n, 3, 3))
    x = ad.reshape(ad.matmul(rg, pre_points[:, :, None]), (n, 3))
    scale_idx = frame_idx if leaves.logscale.shape[0] > 1 else np.zeros(n, dtype=int)
    s = ad.exp(ad.gather_rows(leaves.logscale, scale_idx))
    t = ad.gather_rows(leaves.trans, frame_idx)
    return ad.add(ad.mul(x, s), t)


def _project_t(camera, pts: Tensor) -> Tensor:
    cam = ad.add(ad.matmul(pts, camera.rot.T), camera.trans)
    x = ad.narrow(cam, 1, 0, 1)
    y = ad.narrow(cam, 1, 1, 1)
    z = ad.narrow(cam, 1, 2, 1)
    u = ad.add(ad.mul(ad.div(x, z), camera.fx), camera.cx)
    v = ad.add(ad.mul(ad.div(y, z), camera.fy), camera.cy)
    return ad.concat([u, v], axis=1)


def _cam_depth_t(camera, pts: Tensor) -> Tensor:
    cam = ad.add(ad.matmul(pts, camera.rot.T), camera.trans)
    return ad.reshape(ad.narrow(cam, 1, 2, 1), (-1,))


# ---------------------------------------------------------------------------
# sequence alignment


@dataclass
class AlignWeights:
    lmk: float = 1.0
    order: float = 100.0
    contact: float = 10.0
    smooth: float = 1.0


@dataclass
class AlignConfig:
    outer_iters: int = 24
    inner_iters: int = 12
    final_inner_iters: int = 400         # long last iteration, fixed samples
    lr: float = 6e-3
    lr_final_frac: float = 0.2           # geometric decay across outer iters
    n_depth_pairs: int = 128
    pair_distance_px: float = 40.0
    order_sign_margin: float = 1.5e-4    # absorbs depth quantization
    contact_k: int = 3
    contact_radius: float = 0.03
    seed: int = 0
    weights: AlignWeights = field(default_factory=AlignWeights)
    share_scale: bool = True             # one scale per model per sequence
    penetration_resolution: int = 24
    report_penetration: bool = True


class _Params:
    """Flat storage for the optimizable per-frame global channels."""

    GROUPS = ("face_rot", "face_trans", "face_logscale",
              "hand_rot", "hand_trans", "hand_logscale")

    def __init__(self, tracks, share_scale: bool = False):
        f = len(tracks)
        face_logs = np.array([[np.log(t.face_pose.scale)] for t in tracks])
        hand_logs = np.array([[np.log(t.hand_pose.scale)] for t in tracks])
        if share_scale:
            # scale is a subject property: tie it across the sequence
            face_logs = face_logs.mean(axis=0, keepdims=True)
            hand_logs = hand_logs.mean(axis=0, keepdims=True)
        self.values = {
            "face_rot": np.stack([t.face_pose.global_rot for t in tracks]),
            "face_trans": np.stack([t.face_pose.global_trans for t in tracks]),
            "face_logscale": face_logs,
            "hand_rot": np.stack([t.hand_pose.global_rot for t in tracks]),
            "hand_trans": np.stack([t.hand_pose.global_trans for t in tracks]),
            "hand_logscale": hand_logs,
        }
        opt = tracks[0].optimize
        unsupported = opt - {"face_global", "hand_global",
                             "face_scale", "hand_scale"}
        if unsupported:
            raise NotImplementedError(
                f"stage-1 optimizes global rigid/scale channels only, "
                f"got {unsupported}")
        self.trainable = []
        if "face_global" in opt:
            self.trainable += ["face_rot", "face_trans"]
        if "hand_global" in opt:
            self.trainable += ["hand_rot", "hand_trans"]
        if "face_scale" in opt:
            self.trainable.append("face_logscale")
        if "hand_scale" in opt:
            self.trainable.append("hand_logscale")

    def snapshot(self):
        return {k: v.copy() for k, v in self.values.items()}

    def restore(self, snap):
        self.values = {k: v.copy() for k, v in snap.items()}

    def leaves(self, tape):
        out = {}
        for k, v in self.values.items():
            out[k] = tape.leaf(v, k) if k in self.trainable else Tensor(v)
        return out

    def _scale_row(self, which: str, i: int) -> float:
        logs = self.values[f"{which}_logscale"]
        return float(np.exp(logs[i % len(logs), 0]))

    def to_tracks(self, template_tracks):
        out = []
        for i, t in enumerate(template_tracks):
            nt = t.copy()
            nt.face_pose.global_rot = self.values["face_rot"][i].copy()
            nt.face_pose.global_trans = self.values["face_trans"][i].copy()
            nt.face_pose.scale = self._scale_row("face", i if len(self.values["face_logscale"]) > 1 else 0)
            nt.hand_pose.global_rot = self.values["hand_rot"][i].copy()
            nt.hand_pose.global_trans = self.values["hand_trans"][i].copy()
            nt.hand_pose.scale = self._scale_row("hand", i if len(self.values["hand_logscale"]) > 1 else 0)
            out.append(nt)
        return out


def _preskin(model, theta, psi):
    """LBS without the global transform (constant while theta/psi frozen)."""
    pose = PoseParams(theta=theta)
    expr = ExpressionParams(psi=psi)
    return mm.lbs_forward(model, pose, expr)


def _pair_pixels(obs, n_pairs, max_dist, rng, erosion: int = 2):
    """Sample (hand pixel, nearest face pixel) pairs within a pixel radius.

    Masks are eroded first: silhouette-boundary pixels see surfaces at
    grazing angles where depth is unstable, which would poison the ordering
    signal."""
    maskh = obs.mask_hand.astype(bool)
    maskf = obs.mask_face.astype(bool)
    if erosion > 0:
        maskh = ndimage.binary_erosion(maskh, iterations=erosion)
        maskf = ndimage.binary_erosion(maskf, iterations=erosion)
    if not maskh.any() or not maskf.any():
        return None
    dist_to_face, (ir, ic) = ndimage.distance_transform_edt(
        ~maskf, return_indices=True)
    eligible = maskh & (dist_to_face <= max_dist)
    rows, cols = np.nonzero(eligible)
    if len(rows) == 0:
        return None
    pick = rng.choice(len(rows), size=min(n_pairs, len(rows)), replace=False)
    hr, hc = rows[pick], cols[pick]
    fr, fc = ir[hr, hc], ic[hr, hc]
    return hr, hc, fr, fc


@dataclass
class _FrameSamples:
    frame: int
    hand_px: np.ndarray       # (P, 2) rows/cols
    face_px: np.ndarray
    est_hand: np.ndarray      # (P,)
    est_face: np.ndarray
    hand_tri: np.ndarray      # (P, 3) vertex ids on the hand mesh
    hand_bary: np.ndarray     # (P, 3)
    face_tri: np.ndarray
    face_bary: np.ndarray
    contact: ContactPairSet


def _resample(dataset_obs, camera, head, hand, params, pre_face, pre_hand,
              cfg: AlignConfig, rng):
    """Rebuild depth pairs (fixed barycentric) and contact pairs from the
    current track state."""
    samples = []
    n_frames = len(dataset_obs)
    for f in range(n_frames):
        obs = dataset_obs[f]
        face_posed = _apply_global(params, "face", f, pre_face[f])
        hand_posed = _apply_global(params, "hand", f, pre_hand[f])

        # contact pairs: K nearest contact-prone face verts per fingertip
        tips = hand_posed[hand.fingertips]
        cand = face_posed[head.contact_verts]
        d2 = ((tips[:, None, :] - cand[None, :, :]) ** 2).sum(axis=2)
        nearest = np.argsort(d2, axis=1)[:, :cfg.contact_k]
        contact = ContactPairSet(fingertip_ids=hand.fingertips.copy(),
                                 face_ids=head.contact_verts[nearest])

        pair = _pair_pixels(obs, cfg.n_depth_pairs, cfg.pair_distance_px, rng)
        if pair is None:
            samples.append(_FrameSamples(
                frame=f, hand_px=np.zeros((0, 2), dtype=int),
                face_px=np.zeros((0, 2), dtype=int), est_hand=np.zeros(0),
                est_face=np.zeros(0), hand_tri=np.zeros((0, 3), dtype=int),
                hand_bary=np.zeros((0, 3)), face_tri=np.zeros((0, 3), dtype=int),
                face_bary=np.zeros((0, 3)), contact=contact))
            continue
        hr, hc, fr, fc = pair
        oh, dh, _ = camera.pixel_rays(hr, hc)
        of, df, _ = camera.pixel_rays(fr, fc)
        th, fid_h, bary_h = ray_triangle_intersect(oh, dh, hand_posed, hand.faces)
        tf, fid_f, bary_f = ray_triangle_intersect(of, df, face_posed, head.faces)
        ok = (fid_h >= 0) & (fid_f >= 0)
        samples.append(_FrameSamples(
            frame=f,
            hand_px=np.stack([hr[ok], hc[ok]], axis=1),
            face_px=np.stack([fr[ok], fc[ok]], axis=1),
            est_hand=obs.depth[hr[ok], hc[ok]],
            est_face=obs.depth[fr[ok], fc[ok]],
            hand_tri=hand.faces[fid_h[ok]],
            hand_bary=bary_h[ok],
            face_tri=head.faces[fid_f[ok]],
            face_bary=bary_f[ok],
            contact=contact))
    return samples


def _apply_global(params: _Params, which: str, f: int, pre: np.ndarray):
    rot = mm.rodrigues(params.values[f"{which}_rot"][f])
    logs = params.values[f"{which}_logscale"]
    s = np.exp(logs[f if len(logs) > 1 else 0, 0])
    t = params.values[f"{which}_trans"][f]
    return s * (pre @ rot.T) + t


@dataclass
class _LossBatches:
    """Index/constant arrays consumed by the per-step loss build."""

    lmk_face: tuple | None      # (frame idx, pre points, observed px)
    lmk_hand: tuple | None
    depth: tuple | None         # (frame idx, hand tri pre, hand bary,
    #                              face tri pre, face bary, est_h, est_f)
    contact: tuple | None       # (frame idx, tip pre, face pre)


def _landmark_batches(observations, head, hand, pre_face, pre_hand):
    out = []
    for model, pre, lmset, key in (
            (head, pre_face, "lmk_face", "lmk_face_occluded"),
            (hand, pre_hand, "lmk_hand", "lmk_hand_occluded")):
        frames, pres, obs_px = [], [], []
        for f, obs in enumerate(observations):
            vis = ~getattr(obs, key)
            ids = np.nonzero(vis)[0]
            if len(ids) == 0:
                continue
            frames.append(np.full(len(ids), f))
            pres.append(pre[f][model.landmarks[ids]])
            obs_px.append(getattr(obs, lmset)[ids])
        if frames:
            out.append((np.concatenate(frames), np.concatenate(pres),
                        np.concatenate(obs_px)))
        else:
            out.append(None)
    return out[0], out[1]


def _sample_batches(samples, pre_face, pre_hand):
    fidx, hpre, hbary, fpre_t, fbary, eh, ef = [], [], [], [], [], [], []
    for s in samples:
        p = len(s.est_hand)
        if p == 0:
            continue
        fidx.append(np.full(p, s.frame))
        hpre.append(pre_hand[s.frame][s.hand_tri])
        hbary.append(s.hand_bary)
        fpre_t.append(pre_face[s.frame][s.face_tri])
        fbary.append(s.face_bary)
        eh.append(s.est_hand)
        ef.append(s.est_face)
    depth = None
    if fidx:
        depth = (np.concatenate(fidx),
                 np.concatenate(hpre).reshape(-1, 3), np.concatenate(hbary),
                 np.concatenate(fpre_t).reshape(-1, 3), np.concatenate(fbary),
                 np.concatenate(eh), np.concatenate(ef))

    c_frames, c_tip, c_face = [], [], []
    for s in samples:
        n, k = s.contact.face_ids.shape
        tips = np.repeat(s.contact.fingertip_ids, k)
        faces = s.contact.face_ids.reshape(-1)
        c_frames.append(np.full(n * k, s.frame))
        c_tip.append(pre_hand[s.frame][tips])
        c_face.append(pre_face[s.frame][faces])
    contact = None
    if c_frames:
        contact = (np.concatenate(c_frames), np.concatenate(c_tip),
                   np.concatenate(c_face))
    return depth, contact


def _build_losses(tape, params, batches: _LossBatches, camera,
                  cfg: AlignConfig):
    """Total loss tensor + per-term values for one evaluation."""
    leaves = params.leaves(tape)
    face_leaves = _RigidLeaves(leaves["face_rot"], leaves["face_trans"],
                               leaves["face_logscale"])
    hand_leaves = _RigidLeaves(leaves["hand_rot"], leaves["hand_trans"],
                               leaves["hand_logscale"])

    terms = {}
    proj_parts, obs_parts = [], []
    for batch, rig in ((batches.lmk_face, face_leaves),
                       (batches.lmk_hand, hand_leaves)):
        if batch is None:
            continue
        frames, pre, obs_px = batch
        pts = _posed_points(rig, frames, pre)
        proj_parts.append(_project_t(camera, pts))
        obs_parts.append(obs_px)
    if proj_parts:
        proj = ad.concat(proj_parts, axis=0) if len(proj_parts) > 1 else proj_parts[0]
        terms["lmk"] = landmark_loss(proj, np.concatenate(obs_parts))
    else:
        terms["lmk"] = Tensor(0.0)

    if batches.depth is not None:
        fidx, hpre, hbary, fpre_t, fbary, eh, ef = batches.depth
        p = len(fidx)
        tri_idx = np.repeat(fidx, 3)
        hand_tri_pts = _posed_points(hand_leaves, tri_idx, hpre)
        face_tri_pts = _posed_points(face_leaves, tri_idx, fpre_t)
        zh = ad.reshape(_cam_depth_t(camera, hand_tri_pts), (p, 3))
        zf = ad.reshape(_cam_depth_t(camera, face_tri_pts), (p, 3))
        rend_h = ad.tsum(ad.mul(zh, hbary), axis=1)
        rend_f = ad.tsum(ad.mul(zf, fbary), axis=1)
        terms["order"] = depth_order_loss(eh, ef, rend_h, rend_f,
                                          sign_margin=cfg.order_sign_margin)
    else:
        terms["order"] = depth_order_loss(np.zeros(0), np.zeros(0),
                                          Tensor(np.zeros(0)),
                                          Tensor(np.zeros(0)))

    if batches.contact is not None:
        c_frames, c_tip, c_face = batches.contact
        tip_pts = _posed_points(hand_leaves, c_frames, c_tip)
        face_pts = _posed_points(face_leaves, c_frames, c_face)
        terms["contact"] = contact_reg_loss(tip_pts, face_pts,
                                            activation_radius=cfg.contact_radius)
    else:
        terms["contact"] = Tensor(0.0)

    # temporal smoothness over every channel group (frozen ones are constant)
    sm = None
    for name in _Params.GROUPS:
        t = smoothness_loss(leaves[name])
        sm = t if sm is None else ad.add(sm, t)
    terms["smooth"] = sm

    w = cfg.weights
    total = ad.add(ad.add(ad.mul(terms["lmk"], w.lmk),
                          ad.mul(terms["order"], w.order)),
                   ad.add(ad.mul(terms["contact"], w.contact),
                          ad.mul(terms["smooth"], w.smooth)))
    return total, {k: float(v.data) for k, v in terms.items()}, leaves


def measure_depth_order_violation(params_or_tracks, observations, camera,
                                  head, hand, n_pairs: int = 128,
                                  seed: int = 1234,
                                  sign_margin: float = 1.5e-4):
    """Fraction of sampled pixel pairs whose rendered ordering contradicts
    the estimated ordering (ties excluded)."""
    if isinstance(params_or_tracks, list):
        tracks = params_or_tracks
        params = _Params(tracks)
        pre_face = [_preskin(head, t.face_pose.theta, t.face_expr.psi)
                    for t in tracks]
        pre_hand = [_preskin(hand, t.hand_pose.theta, np.zeros(0))
                    for t in tracks]
    else:
        raise TypeError("expected a list of FrameTracks")
    rng = np.random.default_rng(seed)
    bad = 0
    total = 0
    for f, obs in enumerate(observations):
        pair = _pair_pixels(obs, n_pairs, 40.0, rng)
        if pair is None:
            continue
        hr, hc, fr, fc = pair
        hand_posed = _apply_global(params, "hand", f, pre_hand[f])
        face_posed = _apply_global(params, "face", f, pre_face[f])
        oh, dh, _ = camera.pixel_rays(hr, hc)
        of, df, _ = camera.pixel_rays(fr, fc)
        th, fid_h, _ = ray_triangle_intersect(oh, dh, hand_posed, hand.faces)
        tf, fid_f, _ = ray_triangle_intersect(of, df, face_posed, head.faces)
        ok = (fid_h >= 0) & (fid_f >= 0)
        if not ok.any():
            continue
        ph = obs.depth[hr[ok], hc[ok]]
        pf = obs.depth[fr[ok], fc[ok]]
        hit_h = camera.world_to_cam(oh[ok] + th[ok, None] * dh[ok])[:, 2]
        hit_f = camera.world_to_cam(of[ok] + tf[ok, None] * df[ok])[:, 2]
        sign = np.sign(ph - pf)
        sign[np.abs(ph - pf) <= sign_margin] = 0.0
        active = sign != 0.0
        bad += int(np.count_nonzero(sign[active] * (hit_h - hit_f)[active] < 0))
        total += int(active.sum())
    return bad / total if total else 0.0


def _penetration_per_frame(params, head, hand, pre_face, pre_hand, resolution):
    """Mesh-vs-mesh interpenetration volume (mm^3) per frame."""
    from .evalmetrics import interpenetration_volume
    out = []
    for f in range(len(pre_face)):
        face_posed = _apply_global(params, "face", f, pre_face[f])
        hand_posed = _apply_global(params, "hand", f, pre_hand[f])
        box = aabb_overlap(face_posed.min(axis=0), face_posed.max(axis=0),
                           hand_posed.min(axis=0), hand_posed.max(axis=0))
        if box is None:
            out.append(0.0)
            continue
        face_field = MeshDistanceField(face_posed, head.faces)
        hand_field = MeshDistanceField(hand_posed, hand.faces)
        vol = interpenetration_volume(
            lambda p: -face_field.signed_distance(p),
            lambda p: hand_field.contains(p).astype(np.float64),
            box, resolution=resolution)
        out.append(float(vol))
    return out


def align_sequence(initial_tracks, observations, camera, head, hand,
                   config: AlignConfig | None = None):
    """Adam refinement of the global channels against the four stage-1
    losses. Outer iterations resample depth pairs and contact pairs; inner
    iterations step with fixed samples. An outer iteration that fails to
    reduce its own loss is rolled back, so the sequence of accepted states
    never increases the objective.

    Returns (refined tracks, diagnostics dict).
    """
    if len(initial_tracks) != len(observations):
        raise ValueError("tracks and observations must be frame-aligned")
    cfg = config or AlignConfig()
    params = _Params(initial_tracks, share_scale=cfg.share_scale)
    pre_face = [_preskin(head, t.face_pose.theta, t.face_expr.psi)
                for t in initial_tracks]
    pre_hand = [_preskin(hand, t.hand_pose.theta, np.zeros(0))
                for t in initial_tracks]

    adam = AdamState(lr=cfg.lr)
    lmk_face_batch, lmk_hand_batch = _landmark_batches(
        observations, head, hand, pre_face, pre_hand)
    curve = []
    accepted = 0
    n_outer = cfg.outer_iters + (1 if cfg.final_inner_iters > 0 else 0)
    for outer in range(n_outer):
        final_phase = outer >= cfg.outer_iters
        if cfg.outer_iters > 1:
            frac = min(outer / (cfg.outer_iters - 1), 1.0)
            adam.lr = cfg.lr * cfg.lr_final_frac ** frac
        n_inner = cfg.final_inner_iters if final_phase else cfg.inner_iters
        rng = np.random.default_rng(cfg.seed + 1000 * outer)
        samples = _resample(observations, camera, head, hand, params,
                            pre_face, pre_hand, cfg, rng)
        depth_batch, contact_batch = _sample_batches(samples, pre_face, pre_hand)
        batches = _LossBatches(lmk_face=lmk_face_batch, lmk_hand=lmk_hand_batch,
                               depth=depth_batch, contact=contact_batch)
        snap = params.snapshot()
        adam_snap = (adam.step_count, {k: v.copy() for k, v in adam.m.items()},
                     {k: v.copy() for k, v in adam.v.items()})
        entry = None
        try:
            for inner in range(n_inner):
                if final_phase and n_inner > 1:
                    adam.lr = (cfg.lr * cfg.lr_final_frac
                               * 0.1 ** (inner / (n_inner - 1)))
                tape = ad.Tape()
                total, term_vals, leaves = _build_losses(tape, params, batches,
                                                         camera, cfg)
                if inner == 0:
                    first_loss = float(total.data)
                    entry = {"iter": outer, "total": first_loss, **term_vals}
                tape.backward(total)
                grads = {k: tape.grad(leaves[k]) for k in params.trainable}
                adam_step(adam, {k: params.values[k] for k in params.trainable},
                          grads)
            tape = ad.Tape()
            total_after, _, _ = _build_losses(tape, params, batches, camera, cfg)
            if float(total_after.data) > first_loss + 1e-12:
                params.restore(snap)
                adam.step_count, adam.m, adam.v = adam_snap
                entry["accepted"] = False
            else:
                entry["accepted"] = True
                accepted += 1
        except ad.NonFiniteError:
            log.error("non-finite loss at outer iteration %d; aborting with "
                      "last good state", outer)
            params.restore(snap)
            adam.step_count, adam.m, adam.v = adam_snap
            entry = entry or {"iter": outer, "total": float("nan")}
            entry["accepted"] = False
            curve.append(entry)
            break
        curve.append(entry)

    tracks = params.to_tracks(initial_tracks)
    diagnostics = {
        "loss_curve": curve,
        "accepted_iterations": accepted,
        "violation_rate": measure_depth_order_violation(
            tracks, observations, camera, head, hand,
            n_pairs=cfg.n_depth_pairs, seed=cfg.seed + 999,
            sign_margin=cfg.order_sign_margin),
    }
    if cfg.report_penetration:
        diagnostics["interpenetration_mm3_per_frame"] = _penetration_per_frame(
            params, head, hand, pre_face, pre_hand, cfg.penetration_resolution)
    return tracks, diagnostics
