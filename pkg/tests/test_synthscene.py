import hashlib
from pathlib import Path

import numpy as np
import pytest

from contactavatar import morphable as mm
from contactavatar import synthscene as ss
from contactavatar.meshes import (MeshDistanceField, ray_triangle_intersect,
                                  vertex_normals)
from contactavatar.morphable import ExpressionParams, MorphableModel, PoseParams
from contactavatar.synthscene import (Camera, GroundTruthFrame, NoiseConfig,
                                      SceneError)


def _rigid_model(verts, faces):
    v = len(verts)
    return MorphableModel(
        template=verts, faces=faces, expr_basis=np.zeros((0, v, 3)),
        pose_basis=np.zeros((1, 9, v, 3)), weights=np.ones((v, 1)),
        joint_regressor=np.full((1, v), 1.0 / v),
        parents=np.array([-1], dtype=np.int64),
        landmarks=np.array([0], dtype=np.int64),
        fingertips=np.zeros(0, dtype=np.int64),
        contact_verts=np.zeros(0, dtype=np.int64))


def _far_hand():
    verts, faces = mm.icosphere(1)
    return _rigid_model(verts * 0.01 + np.array([5.0, 5.0, 5.0]), faces)


@pytest.fixture(scope="module")
def poke_seq():
    return ss.generate_sequence(seed=3, n_frames=16, scenario="cheek-poke")


def test_sphere_center_pixel_depth():
    # principal point centered on a pixel so one ray runs down the axis
    cam = Camera(fx=70.0, fy=70.0, cx=32.5, cy=32.5, width=64, height=64)
    verts, faces = mm.icosphere(5)
    r, d = 0.1, 0.45
    sphere = _rigid_model(verts * r + np.array([0.0, 0.0, d]), faces)
    gt = GroundTruthFrame(
        face_pose=PoseParams.identity(1), face_expr=ExpressionParams.zeros(0),
        hand_pose=PoseParams.identity(1),
        displacement=np.zeros((sphere.n_verts, 3)),
        contact_flags=np.zeros(sphere.n_verts, dtype=bool))
    obs = ss.render_frame(sphere, _far_hand(), gt, cam)
    center_depth = obs.depth[32, 32]
    assert abs(center_depth - (d - r)) < 0.5 * ss.DEPTH_QUANTUM

    # no hand in the frustum: hand mask must be empty
    assert obs.mask_hand.sum() == 0


def test_rendered_depth_matches_ray_mesh_oracle(poke_seq):
    gt, obs = poke_seq.frames[5]
    head, hand, cam = poke_seq.head, poke_seq.hand, poke_seq.camera
    fverts = mm.lbs_forward(head, gt.face_pose, gt.face_expr,
                            extra_offsets=gt.displacement)
    rows, cols = np.nonzero(obs.mask_face)
    rng = np.random.default_rng(0)
    pick = rng.choice(len(rows), size=min(60, len(rows)), replace=False)
    origins, dirs, z_per_t = cam.pixel_rays(rows[pick], cols[pick])
    t, fid, _ = ray_triangle_intersect(origins, dirs, fverts, head.faces)
    assert np.all(fid >= 0)
    z = t * z_per_t
    np.testing.assert_allclose(z, obs.depth[rows[pick], cols[pick]],
                               atol=ss.DEPTH_QUANTUM * 1.01)


def test_masks_are_disjoint(poke_seq):
    for _, obs in poke_seq.frames:
        assert not np.any((obs.mask_face == 1) & (obs.mask_hand == 1))


def test_render_deterministic(poke_seq):
    gt, obs = poke_seq.frames[4]
    again = ss.render_frame(poke_seq.head, poke_seq.hand, gt, poke_seq.camera,
                            frame_index=4)
    np.testing.assert_array_equal(again.rgb, obs.rgb)
    np.testing.assert_array_equal(again.depth, obs.depth)
    np.testing.assert_array_equal(again.mask_face, obs.mask_face)


# ---------------------------------------------------------------------------
# indentation


def _plane_grid(n=30, half=0.05):
    xs = np.linspace(-half, half, n)
    gx, gy = np.meshgrid(xs, xs)
    verts = np.stack([gx.ravel(), gy.ravel(), np.zeros(n * n)], axis=1)
    faces = []
    for i in range(n - 1):
        for j in range(n - 1):
            a = i * n + j
            faces.append([a, a + 1, a + n])
            faces.append([a + 1, a + n + 1, a + n])
    return verts, np.array(faces, dtype=np.int64)


def test_indentation_of_plane_by_sphere():
    verts, faces = _plane_grid()
    normals = np.tile([0.0, 0.0, 1.0], (len(verts), 1))
    sverts, sfaces = mm.icosphere(3)
    r, pen = 0.012, 0.005
    sphere = MeshDistanceField(sverts * r + np.array([0.0, 0.0, r - pen]),
                               sfaces)
    disp, flags = ss.simulate_indentation(verts, normals, sphere, sigma=0.008)
    mags = np.linalg.norm(disp, axis=1)
    assert flags.any()
    # peak displacement matches the penetration depth at the contact center
    assert mags.max() == pytest.approx(pen, abs=7e-4)
    peak = verts[np.argmax(mags)]
    assert np.linalg.norm(peak[:2]) < 0.004
    # decays with the falloff: zero beyond 3 sigma of any contact point
    contact_pts = verts[np.linalg.norm(verts[:, :2], axis=1)
                        < np.sqrt(max(2 * r * pen - pen * pen, 0.0))]
    far = np.array([v for v in verts
                    if min(np.linalg.norm(contact_pts - v, axis=1)) > 0.025])
    far_ids = [int(np.nonzero((verts == f).all(axis=1))[0][0]) for f in far[:20]]
    assert np.all(mags[far_ids] == 0.0)
    # pushed outside the sphere within 0.1 mm
    sd_after = sphere.signed_distance(verts + disp)
    assert sd_after.min() > -1e-4


def test_indentation_zero_without_penetration():
    verts, faces = _plane_grid(n=10)
    normals = np.tile([0.0, 0.0, 1.0], (len(verts), 1))
    sverts, sfaces = mm.icosphere(2)
    sphere = MeshDistanceField(sverts * 0.01 + np.array([0.0, 0.0, 0.05]),
                               sfaces)
    disp, flags = ss.simulate_indentation(verts, normals, sphere)
    assert not flags.any()
    assert np.all(disp == 0.0)


def test_indentation_field_is_continuous(poke_seq):
    # penetration here means what the indentation model means: the exit
    # distance along the vertex normal for vertices inside the hand
    head = poke_seq.head
    edges = np.concatenate([head.faces[:, [0, 1]], head.faces[:, [1, 2]],
                            head.faces[:, [2, 0]]])
    checked = 0
    for gt, _ in poke_seq.frames:
        if not gt.contact_flags.any():
            continue
        fverts = mm.lbs_forward(head, gt.face_pose, gt.face_expr)
        hverts = mm.lbs_forward(poke_seq.hand, gt.hand_pose,
                                ExpressionParams.zeros(0))
        field = MeshDistanceField(hverts, poke_seq.hand.faces)
        normals = vertex_normals(fverts, head.faces)
        lo, hi = field.bounds
        near = np.all((fverts > lo - 0.02) & (fverts < hi + 0.02), axis=1)
        inside = np.zeros(len(fverts), dtype=bool)
        inside[near] = field.contains(fverts[near])
        if not inside.any():
            continue
        t_exit, fid, _ = ray_triangle_intersect(
            fverts[inside], -normals[inside], hverts, poke_seq.hand.faces)
        pen = float(t_exit[np.isfinite(t_exit)].max())
        jump = np.linalg.norm(gt.displacement[edges[:, 0]]
                              - gt.displacement[edges[:, 1]], axis=1)
        assert jump.max() < pen / 2.0
        checked += 1
    assert checked > 0


def test_indentation_result_outside_hand(poke_seq):
    for gt, _ in poke_seq.frames:
        if not gt.contact_flags.any():
            continue
        fverts = mm.lbs_forward(poke_seq.head, gt.face_pose, gt.face_expr,
                                extra_offsets=gt.displacement)
        hverts = mm.lbs_forward(poke_seq.hand, gt.hand_pose,
                                ExpressionParams.zeros(0))
        field = MeshDistanceField(hverts, poke_seq.hand.faces)
        sd = field.signed_distance(fverts[gt.contact_flags])
        assert sd.min() > -1e-4


# ---------------------------------------------------------------------------
# sequences


def test_no_contact_scenario_has_zero_displacement():
    seq = ss.generate_sequence(seed=7, n_frames=10, scenario="no-contact")
    for gt, _ in seq.frames:
        assert not gt.contact_flags.any()
        assert np.all(gt.displacement == 0.0)


def test_sequences_deterministic():
    a = ss.generate_sequence(seed=11, n_frames=6, scenario="chin-rest")
    b = ss.generate_sequence(seed=11, n_frames=6, scenario="chin-rest")
    for (ga, oa), (gb, ob) in zip(a.frames, b.frames):
        np.testing.assert_array_equal(ga.displacement, gb.displacement)
        np.testing.assert_array_equal(ga.hand_pose.global_trans,
                                      gb.hand_pose.global_trans)
        np.testing.assert_array_equal(oa.rgb, ob.rgb)
        np.testing.assert_array_equal(oa.depth, ob.depth)


def test_cheek_poke_reaches_3mm_penetration(poke_seq):
    deepest = 0.0
    for gt, _ in poke_seq.frames:
        fverts = mm.lbs_forward(poke_seq.head, gt.face_pose, gt.face_expr)
        hverts = mm.lbs_forward(poke_seq.hand, gt.hand_pose,
                                ExpressionParams.zeros(0))
        field = MeshDistanceField(hverts, poke_seq.hand.faces)
        lo, hi = field.bounds
        near = np.all((fverts > lo - 0.01) & (fverts < hi + 0.01), axis=1)
        if near.any():
            deepest = max(deepest, -float(field.signed_distance(fverts[near]).min()))
    assert deepest >= 0.003


def test_contact_scenarios_have_enough_contact_frames(poke_seq):
    frac = np.mean([gt.contact_flags.any() for gt, _ in poke_seq.frames])
    assert frac >= 0.30


def test_unknown_scenario_rejected():
    with pytest.raises(SceneError):
        ss.generate_sequence(seed=0, n_frames=4, scenario="headstand")


# ---------------------------------------------------------------------------
# track perturbation


def test_zero_noise_tracks_equal_ground_truth(poke_seq):
    gts = [gt for gt, _ in poke_seq.frames]
    noise = NoiseConfig(rot_std=0, joint_std=0, trans_std=0, scale_std=0,
                        expr_std=0, hand_depth_bias=0)
    tracks = ss.perturb_tracks(gts, noise, seed=0, camera=poke_seq.camera)
    for t, gt in zip(tracks, gts):
        np.testing.assert_array_equal(t.face_pose.global_rot,
                                      gt.face_pose.global_rot)
        np.testing.assert_array_equal(t.hand_pose.global_trans,
                                      gt.hand_pose.global_trans)
        assert t.face_pose.scale == gt.face_pose.scale


def test_depth_bias_measured(poke_seq):
    gts = [gt for gt, _ in poke_seq.frames]
    noise = NoiseConfig(rot_std=0, joint_std=0, trans_std=0, scale_std=0,
                        expr_std=0, hand_depth_bias=0.015)
    tracks = ss.perturb_tracks(gts, noise, seed=1, camera=poke_seq.camera)
    errs = [t.hand_pose.global_trans - gt.hand_pose.global_trans
            for t, gt in zip(tracks, gts)]
    mean_err = np.mean(errs, axis=0)
    np.testing.assert_allclose(mean_err, [0.0, 0.0, 0.015], atol=1e-12)


def test_perturbation_deterministic(poke_seq):
    gts = [gt for gt, _ in poke_seq.frames]
    noise = NoiseConfig()
    t1 = ss.perturb_tracks(gts, noise, seed=9)
    t2 = ss.perturb_tracks(gts, noise, seed=9)
    for a, b in zip(t1, t2):
        np.testing.assert_array_equal(a.hand_pose.global_trans,
                                      b.hand_pose.global_trans)
        np.testing.assert_array_equal(a.face_pose.global_rot,
                                      b.face_pose.global_rot)


def test_ar1_noise_is_temporally_correlated():
    rng_frames = ss.generate_sequence(seed=2, n_frames=40,
                                      scenario="no-contact")
    gts = [gt for gt, _ in rng_frames.frames]
    noise = NoiseConfig(rot_std=0, joint_std=0, trans_std=0.01, scale_std=0,
                        expr_std=0, hand_depth_bias=0.0, rho=0.8)
    tracks = ss.perturb_tracks(gts, noise, seed=3)
    e = np.stack([t.hand_pose.global_trans - gt.hand_pose.global_trans
                  for t, gt in zip(tracks, gts)])
    lag1 = np.corrcoef(e[:-1, 0], e[1:, 0])[0, 1]
    assert lag1 > 0.4


def test_negative_std_rejected():
    with pytest.raises(SceneError):
        NoiseConfig(trans_std=-1.0).validate()


# ---------------------------------------------------------------------------
# dataset io


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_dataset_round_trip_and_bytes(tmp_path):
    seq = ss.generate_sequence(seed=5, n_frames=5, scenario="cheek-poke")
    d1, d2 = tmp_path / "a", tmp_path / "b"
    ss.save_dataset(d1, seq)
    ss.save_dataset(d2, seq)
    assert _tree_digest(d1) == _tree_digest(d2)

    ds = ss.load_dataset(d1)
    assert ds.scenario == "cheek-poke"
    assert ds.n_frames == 5
    for (gt, obs), lgt, lobs in zip(seq.frames, ds.gt_frames, ds.observations):
        np.testing.assert_array_equal(lobs.rgb, obs.rgb)
        np.testing.assert_array_equal(lobs.depth, obs.depth)
        np.testing.assert_array_equal(lobs.mask_face, obs.mask_face)
        np.testing.assert_array_equal(lgt.contact_flags, gt.contact_flags)
        np.testing.assert_array_equal(lgt.displacement, gt.displacement)
        np.testing.assert_allclose(lgt.hand_pose.global_trans,
                                   gt.hand_pose.global_trans, atol=1e-15)


def test_gt_frame_rejects_displacement_without_contact():
    disp = np.zeros((4, 3))
    disp[2] = [0.0, 0.0, 0.001]
    with pytest.raises(SceneError):
        GroundTruthFrame(face_pose=PoseParams.identity(1),
                         face_expr=ExpressionParams.zeros(0),
                         hand_pose=PoseParams.identity(1),
                         displacement=disp,
                         contact_flags=np.zeros(4, dtype=bool))


def test_camera_validation():
    with pytest.raises(SceneError):
        Camera(fx=-1, fy=1, cx=0, cy=0, width=8, height=8)
    with pytest.raises(SceneError):
        Camera(fx=10, fy=10, cx=100, cy=4, width=8, height=8)
