"""Avatar training: photometric, mask, blendshape-supervision, contact, and
non-rigid regularization losses over sampled ray batches.

The contact and regularization losses run on their own tape where only the
non-rigid network, the contact-coefficient head, and the per-frame latents
are leaves, so geometry and expression deformation receive no gradient from
them.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import avatar as av
from . import defprior as dp
from . import morphable as mm
from .autodiff import Tensor
from .meshes import sample_surface, vertex_normals
from .morphable import ExpressionParams
from .nn import AdamState, adam_step, positional_encoding

_CLAMP = 1e-7


class TrainError(RuntimeError):
    pass


@dataclass
class LossWeights:
    """Total-objective weights plus the blendshape-supervision weights."""

    mask: float = 2.0
    lbs: float = 1.0
    contact: float = 1000.0
    reg: float = 10.0
    lambda_e: float = 1000.0
    lambda_p: float = 1000.0
    lambda_w: float = 0.1
    lambda_n: float = 10000.0


@dataclass
class RayBatch:
    frame: int
    rows: np.ndarray
    cols: np.ndarray
    origins: np.ndarray          # head-local
    dirs: np.ndarray             # head-local, unit
    colors: np.ndarray           # (P, 3) observed
    mask_face: np.ndarray        # (P,)
    mask_hand: np.ndarray
    face_set: np.ndarray = None  # bool: observed face mask AND rendered face hit
    hand_set: np.ndarray = None

    @property
    def size(self) -> int:
        return len(self.rows)

    def validate_sets(self):
        if np.any(self.face_set & ~self.mask_face.astype(bool)):
            raise TrainError("face set must lie inside the face mask")
        if np.any(self.hand_set & ~self.mask_hand.astype(bool)):
            raise TrainError("hand set must lie inside the hand mask")
        if np.any(self.face_set & self.hand_set):
            raise TrainError("face and hand sets must be disjoint")


# ---------------------------------------------------------------------------
# losses (value mode on arrays, differentiable on Tensors)


def _is_tensor(*xs):
    return any(isinstance(x, Tensor) for x in xs)


def rgb_loss(batch_size: int, face_gt, face_pred, hand_gt, hand_pred):
    """Photometric term: squared residuals of face and hand hit pixels,
    both normalized by the full batch size."""
    def term(gt, pred):
        if pred is None or len(np.atleast_2d(ad.value(pred))) == 0:
            return None
        res = ad.sub(pred, gt) if _is_tensor(pred) else np.asarray(pred) - gt
        if _is_tensor(res):
            return ad.tsum(ad.square(res))
        return float((res ** 2).sum())

    parts = [t for t in (term(face_gt, face_pred), term(hand_gt, hand_pred))
             if t is not None]
    if not parts:
        return 0.0
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p) if _is_tensor(total, p) else total + p
    scale = 1.0 / batch_size
    return ad.mul(total, scale) if _is_tensor(total) else total * scale


def mask_loss(labels, occupancy):
    """Binary cross-entropy between observed face-mask labels and the
    occupancy proxy, over the caller-selected pixel set."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        return Tensor(0.0) if _is_tensor(occupancy) else 0.0
    if _is_tensor(occupancy):
        # affine squeeze into (CLAMP, 1-CLAMP) keeps log finite and smooth
        p = ad.add(ad.mul(occupancy, 1.0 - 2 * _CLAMP), _CLAMP)
        ce = ad.neg(ad.add(ad.mul(ad.log(p), labels),
                           ad.mul(ad.log(ad.sub(1.0, p)), 1.0 - labels)))
        return ad.tmean(ce)
    p = np.clip(np.asarray(occupancy, dtype=np.float64), _CLAMP, 1.0 - _CLAMP)
    ce = -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    return float(ce.mean())


def flame_loss(batch_size: int, pred, pseudo_gt, weights: LossWeights,
               include_nonrigid: bool = True):
    """Blendshape/skinning supervision toward nearest-vertex pseudo ground
    truth: (1/|P|) sum of weighted squared residuals on E, P, W, N."""
    def sq(a, b):
        if _is_tensor(a):
            return ad.tsum(ad.square(ad.sub(a, b)))
        return float(((np.asarray(a) - np.asarray(b)) ** 2).sum())

    terms = [(weights.lambda_e, "E"), (weights.lambda_p, "P"),
             (weights.lambda_w, "W")]
    if include_nonrigid:
        terms.append((weights.lambda_n, "N"))
    total = None
    for lam, key in terms:
        t = sq(pred[key], pseudo_gt[key])
        t = ad.mul(t, lam) if _is_tensor(t) else t * lam
        total = t if total is None else (
            ad.add(total, t) if _is_tensor(total, t) else total + t)
    scale = 1.0 / batch_size
    return ad.mul(total, scale) if _is_tensor(total) else total * scale


def contact_loss(s_values):
    """Hinge on the centered face occupancy at hand-surface samples: the
    face interior must not reach them."""
    if _is_tensor(s_values):
        if s_values.size == 0:
            raise TrainError("empty hand sample set")
        return ad.tmean(ad.relu(s_values))
    s = np.asarray(s_values, dtype=np.float64)
    if s.size == 0:
        raise TrainError("empty hand sample set")
    return float(np.maximum(s, 0.0).mean())


def nonrigid_reg_loss(offsets, interpenetrating):
    """Mean L2 norm of contact-blendshape offsets outside the
    interpenetration set."""
    keep = ~np.asarray(interpenetrating, dtype=bool)
    n_keep = int(keep.sum())
    if n_keep == 0:
        return Tensor(0.0) if _is_tensor(offsets) else 0.0
    if _is_tensor(offsets):
        norms = ad.safe_norm(offsets, axis=1)
        w = keep.astype(np.float64) / n_keep
        return ad.tsum(ad.mul(norms, w))
    norms = np.linalg.norm(np.asarray(offsets), axis=1)
    return float(norms[keep].mean())


def total_loss(terms: dict, weights: LossWeights):
    """Weighted sum plus per-term breakdown (weights applied)."""
    def val(x):
        return float(x.data) if isinstance(x, Tensor) else float(x)

    breakdown = {
        "rgb": val(terms.get("rgb", 0.0)),
        "mask": weights.mask * val(terms.get("mask", 0.0)),
        "lbs": weights.lbs * val(terms.get("lbs", 0.0)),
        "contact": weights.contact * val(terms.get("contact", 0.0)),
        "reg": weights.reg * val(terms.get("reg", 0.0)),
    }
    total = sum(breakdown.values())
    return total, breakdown


def _weighted_tensor_sum(pairs):
    total = None
    for w, t in pairs:
        if t is None or w == 0.0:
            continue
        term = ad.mul(t, w) if isinstance(t, Tensor) else Tensor(np.asarray(w * t))
        total = term if total is None else ad.add(total, term)
    return total if total is not None else Tensor(0.0)


# ---------------------------------------------------------------------------
# pseudo ground truth


def pseudo_ground_truth(head, basis, posed_verts, query_points):
    """Nearest-vertex attributes plus the prior's per-vertex blendshape
    targets for deformed-space query points."""
    from .morphable import nearest_vertex_ids
    if basis is not None and basis.n_verts != head.n_verts:
        raise TrainError("basis/model vertex count mismatch")
    vids = nearest_vertex_ids(posed_verts, query_points)
    gt = {
        "E": np.transpose(head.expr_basis[:, vids, :], (1, 0, 2)),
        "P": np.transpose(head.pose_basis[:, :, vids, :], (2, 0, 1, 3)),
        "W": head.weights[vids],
    }
    if basis is not None:
        gt["N"] = dp.sample_basis_at_vertices(basis, vids)
    else:
        gt["N"] = np.zeros((len(vids), 0, 3))
    return gt


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    pretrain_steps: int = 500
    main_epochs: int = 20
    nonrigid_epochs: int = 10
    rays_per_step: int = 512
    hand_samples: int = 512
    band_samples: int = 1024
    band_width: float = 0.005
    lr: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 10           # epochs
    weights: LossWeights = field(default_factory=LossWeights)
    avatar: av.AvatarConfig = field(default_factory=av.AvatarConfig)
    log_every: int = 25                  # steps


_GATED_PREFIXES = ("nonrigid.", "phi.")


def _leaves_for(tape, params, trainable_prefixes):
    leaves = {}
    for name, val in params.items():
        if any(name.startswith(p) for p in trainable_prefixes):
            leaves[name] = tape.leaf(val, name)
        else:
            leaves[name] = Tensor(val)
    return leaves


def sample_ray_batch(dataset, frame: int, ctx, n_rays: int, rng) -> RayBatch:
    obs = dataset.observations[frame]
    h, w = obs.rgb.shape[:2]
    pick = rng.choice(h * w, size=min(n_rays, h * w), replace=False)
    rows, cols = pick // w, pick % w
    origins_w, dirs_w, _ = dataset.camera.pixel_rays(rows, cols)
    o_local = ctx.world_to_local(origins_w)
    r_inv = mm.rodrigues(ctx.face_pose.global_rot).T
    d_local = dirs_w @ r_inv.T
    d_local /= np.linalg.norm(d_local, axis=1)[:, None]
    return RayBatch(frame=frame, rows=rows, cols=cols, origins=o_local,
                    dirs=d_local, colors=obs.rgb[rows, cols],
                    mask_face=obs.mask_face[rows, cols],
                    mask_hand=obs.mask_hand[rows, cols])


class Trainer:
    def __init__(self, dataset, tracks, basis: dp.DeformationBasis | None,
                 config: TrainConfig | None = None):
        if len(tracks) != dataset.n_frames:
            raise TrainError("dataset/track frame count mismatch")
        self.dataset = dataset
        self.tracks = tracks
        self.basis = basis
        self.cfg = config or TrainConfig()
        if basis is not None and basis.n_components != self.cfg.avatar.n_k:
            raise TrainError(
                f"basis has {basis.n_components} components, avatar expects "
                f"{self.cfg.avatar.n_k}")
        basis_hash = basis.content_hash() if basis is not None else ""
        self.avatar = av.AvatarModel(dataset.head, dataset.hand,
                                     n_frames=dataset.n_frames,
                                     basis_hash=basis_hash,
                                     config=self.cfg.avatar)
        self.adam = AdamState(lr=self.cfg.lr)
        self._ctx_cache: dict[int, av.FrameContext] = {}
        self._posed_cache: dict[int, tuple] = {}
        self.logs: list[dict] = []
        self.step_count = 0

    def frame_context(self, frame: int) -> av.FrameContext:
        if frame not in self._ctx_cache:
            ctx = av.build_frame_context(self.avatar, self.tracks[frame], frame)
            self._ctx_cache[frame] = ctx
        ctx = self._ctx_cache[frame]
        ctx.latent = self.avatar.latents[frame]
        return ctx

    def _posed_face_local(self, frame: int):
        """Tracked face mesh in head-local coords plus vertex normals."""
        if frame not in self._posed_cache:
            t = self.tracks[frame]
            verts = mm.lbs_forward(self.dataset.head,
                                   mm.PoseParams(theta=t.face_pose.theta),
                                   t.face_expr)
            normals = vertex_normals(verts, self.dataset.head.faces)
            self._posed_cache[frame] = (verts, normals)
        return self._posed_cache[frame]

    # -- one optimization step ----------------------------------------------

    def step(self, frame: int, rng, enable_nonrigid: bool):
        cfg = self.cfg
        t_start = time.perf_counter()
        ctx = self.frame_context(frame)
        batch = sample_ray_batch(self.dataset, frame, ctx, cfg.rays_per_step, rng)
        hits = av.intersect_frame(self.avatar, ctx, batch.origins, batch.dirs,
                                  which="joint")

        face_hit = np.array([h.kind == "face" for h in hits])
        hand_hit = np.array([h.kind == "hand" for h in hits])
        batch.face_set = face_hit & batch.mask_face.astype(bool)
        batch.hand_set = hand_hit & batch.mask_hand.astype(bool)
        batch.validate_sets()

        params = self.avatar.params()
        grads_total: dict[str, np.ndarray] = {}
        terms: dict[str, object] = {}

        # --- tape 1: photometric, mask, blendshape supervision
        tape = ad.Tape()
        main_prefixes = ("geo.", "def.", "rgb.", "handtex.", "latents")
        if enable_nonrigid:
            main_prefixes += _GATED_PREFIXES
        leaves = _leaves_for(tape, params, main_prefixes)
        latent_row = ad.gather_rows(leaves["latents"], [frame])

        face_ids = np.nonzero(batch.face_set)[0]
        mask_sel = ~batch.face_set & ~batch.mask_hand.astype(bool)
        mask_ids = np.nonzero(mask_sel)[0]

        pts_face = np.stack([hits[i].x_d for i in face_ids]) \
            if len(face_ids) else np.zeros((0, 3))
        pts_mask = np.stack([
            batch.origins[i] + hits[i].min_abs_s_t * batch.dirs[i]
            if np.isfinite(hits[i].min_abs_s_t) else batch.origins[i]
            for i in mask_ids]) if len(mask_ids) else np.zeros((0, 3))
        n_face = len(pts_face)
        all_pts = np.concatenate([pts_face, pts_mask])

        if len(all_pts):
            x_c, info = av.canonical_map_t(
                self.avatar, ctx, all_pts, params=leaves, latent=latent_row,
                include_nonrigid=enable_nonrigid)
            s_all = av.centered_occupancy_t(self.avatar, x_c, params=leaves)
            occ_all = ad.add(s_all, 0.5)
        else:
            x_c = info = occ_all = None

        # rgb: face head colors at hit points, hand texture at hand hits
        face_pred = None
        if n_face:
            normals = av.surface_normal(self.avatar, ctx, pts_face)
            x_c_face = ad.narrow(x_c, 0, 0, n_face)
            enc = positional_encoding(x_c_face, cfg.avatar.pos_octaves)
            cond = np.concatenate([normals,
                                   np.tile(ctx.theta, (n_face, 1)),
                                   np.tile(ctx.psi, (n_face, 1))], axis=1)
            face_pred = self.avatar.f_rgb(ad.concat([enc, Tensor(cond)], axis=1),
                                          params=leaves)
        hand_ids = np.nonzero(batch.hand_set)[0]
        hand_pred = None
        if len(hand_ids):
            pts_hand = np.stack([hits[i].x_d for i in hand_ids])
            n_h = av.hand_normal(ctx, pts_hand)
            x_ct = av.hand_canonical(ctx, self.avatar.hand, pts_hand)
            enc = positional_encoding(Tensor(x_ct), cfg.avatar.pos_octaves)
            hand_pred = self.avatar.f_handtex(
                ad.concat([enc, Tensor(n_h)], axis=1), params=leaves)
        terms["rgb"] = rgb_loss(batch.size,
                                batch.colors[face_ids], face_pred,
                                batch.colors[hand_ids], hand_pred)

        # mask: BCE at the minimum-|s| sample for non-face-set, non-hand rays
        if len(mask_ids):
            occ_proxy = ad.narrow(occ_all, 0, n_face, len(mask_ids))
            terms["mask"] = mask_loss(batch.mask_face[mask_ids], occ_proxy)
        else:
            terms["mask"] = Tensor(0.0)

        # blendshape supervision at face hit points
        if n_face:
            posed, _ = self._posed_face_local(frame)
            gt = pseudo_ground_truth(self.dataset.head, self.basis, posed,
                                     pts_face)
            pred = {
                "E": ad.narrow(info["E"], 0, 0, n_face),
                "P": ad.reshape(
                    ad.narrow(info["P"], 0, 0, n_face),
                    (n_face, self.avatar.head.n_joints, 9, 3)),
                "W": ad.narrow(info["W"], 0, 0, n_face),
            }
            if enable_nonrigid:
                pred["N"] = ad.narrow(info["N"], 0, 0, n_face)
                gt_n = gt["N"]
            else:
                gt_n = None
            gt_use = {"E": gt["E"], "P": gt["P"], "W": gt["W"], "N": gt_n}
            terms["lbs"] = flame_loss(batch.size, pred, gt_use, cfg.weights,
                                      include_nonrigid=enable_nonrigid
                                      and self.basis is not None)
        else:
            terms["lbs"] = Tensor(0.0)

        w = cfg.weights
        main_total = _weighted_tensor_sum([
            (1.0, terms["rgb"]), (w.mask, terms["mask"]), (w.lbs, terms["lbs"])])
        if main_total.tape is tape:
            tape.backward(main_total)
            for name in leaves:
                if leaves[name].tape is tape:
                    g = tape.grad(leaves[name])
                    grads_total[name] = grads_total.get(name, 0.0) + g

        # --- tape 2: contact + non-rigid regularization (gated gradients)
        if enable_nonrigid:
            tape2 = ad.Tape()
            leaves2 = _leaves_for(tape2, params, _GATED_PREFIXES + ("latents",))
            latent2 = ad.gather_rows(leaves2["latents"], [frame])

            hand_pts, _, _ = sample_surface(
                ctx.hand_verts_local, self.avatar.hand.faces,
                cfg.hand_samples, rng)
            x_c_h, _ = av.canonical_map_t(self.avatar, ctx, hand_pts,
                                          params=leaves2, latent=latent2)
            s_h = av.centered_occupancy_t(self.avatar, x_c_h, params=leaves2)
            terms["contact"] = contact_loss(s_h)

            posed, normals = self._posed_face_local(frame)
            band_pts, band_fid, band_n = sample_surface(
                posed, self.avatar.head.faces, cfg.band_samples, rng)
            offsets_along = rng.uniform(-cfg.band_width, cfg.band_width,
                                        size=(cfg.band_samples, 1))
            band_pts = band_pts + offsets_along * band_n
            x_c_b, info_b = av.canonical_map_t(self.avatar, ctx, band_pts,
                                               params=leaves2, latent=latent2)
            s_b = self.avatar.centered_occupancy(ad.value(x_c_b))
            occ_h = av.hand_occupancy(ctx, band_pts, cfg.avatar.hand_beta)
            inside_both = (s_b > 0.0) & (occ_h > 0.5)
            b_n = ad.sub(info_b["x_pre"], x_c_b)
            terms["reg"] = nonrigid_reg_loss(b_n, inside_both)

            gated_total = _weighted_tensor_sum([
                (w.contact, terms["contact"]), (w.reg, terms["reg"])])
            if gated_total.tape is tape2:
                tape2.backward(gated_total)
                for name in leaves2:
                    if leaves2[name].tape is tape2:
                        g = tape2.grad(leaves2[name])
                        grads_total[name] = grads_total.get(name, 0.0) + g
        else:
            terms["contact"] = 0.0
            terms["reg"] = 0.0

        adam_step(self.adam, params, grads_total)
        self.avatar.load_params(params)
        # context caches hold no network state; latents refresh per access

        total, breakdown = total_loss(terms, w)
        self.step_count += 1
        return {"step": self.step_count, "frame": frame, "total": total,
                **breakdown, "wall_time": time.perf_counter() - t_start}

    # -- full runs -----------------------------------------------------------

    def train(self, out_path=None, log_path=None):
        cfg = self.cfg
        log_f = open(log_path, "w") if log_path else None
        try:
            pre = av.pretrain_geometry(self.avatar, steps=cfg.pretrain_steps,
                                       seed=cfg.seed)
            self._log(log_f, {"phase": "pretrain", "loss": pre})
            order_rng = np.random.default_rng(cfg.seed + 1)
            total_epochs = cfg.main_epochs + cfg.nonrigid_epochs
            last_good = None
            for epoch in range(total_epochs):
                enable_nr = epoch >= cfg.main_epochs
                frames = order_rng.permutation(self.dataset.n_frames)
                for frame in frames:
                    rng = np.random.default_rng(
                        (cfg.seed, epoch, int(frame), 7919))
                    try:
                        entry = self.step(int(frame), rng, enable_nr)
                    except ad.NonFiniteError as e:
                        self._log(log_f, {"phase": "abort", "error": str(e)})
                        if last_good is not None:
                            self.avatar.load_params(last_good)
                        raise TrainError(f"non-finite loss: {e}") from e
                    entry["epoch"] = epoch
                    entry["nonrigid"] = bool(enable_nr)
                    if self.step_count % cfg.log_every == 0 or \
                            self.step_count == 1:
                        self._log(log_f, entry)
                if (epoch + 1) % cfg.checkpoint_every == 0:
                    last_good = {k: v.copy() for k, v in
                                 self.avatar.params().items()}
                    if out_path:
                        av.save_avatar(out_path, self.avatar)
            if out_path:
                av.save_avatar(out_path, self.avatar)
        finally:
            if log_f:
                log_f.close()
        return self.avatar

    def _log(self, log_f, entry: dict):
        self.logs.append(entry)
        if log_f:
            log_f.write(json.dumps(entry, sort_keys=True) + "\n")
            log_f.flush()


def train(dataset, tracks, basis, config: TrainConfig | None = None,
          out_path=None, log_path=None):
    trainer = Trainer(dataset, tracks, basis, config)
    avatar = trainer.train(out_path=out_path, log_path=log_path)
    return avatar, trainer.logs
