import logging

import numpy as np
import pytest

from contactavatar import alignment as al
from contactavatar import autodiff as ad
from contactavatar import morphable as mm
from contactavatar import synthscene as ss
from contactavatar.autodiff import Tape, Tensor

from fdcheck import assert_grads_close, finite_diff


# ---------------------------------------------------------------------------
# depth order loss


def test_depth_order_hand_behind_but_rendered_in_front():
    # sign(2-1)=1; hinge on -(1.5-1.8) = 0.3
    loss = al.depth_order_loss([2.0], [1.0], [1.5], [1.8])
    assert loss == pytest.approx(0.3, abs=1e-12)


def test_depth_order_correct_ordering_is_free():
    assert al.depth_order_loss([2.0], [1.0], [2.1], [1.7]) == 0.0


def test_depth_order_tied_estimates_contribute_zero():
    assert al.depth_order_loss([1.5], [1.5], [9.0], [1.0]) == 0.0


def test_depth_order_mean_over_pairs():
    loss = al.depth_order_loss([2.0, 2.0], [1.0, 1.0], [1.5, 2.1], [1.8, 1.7])
    assert loss == pytest.approx(0.15, abs=1e-12)


def test_depth_order_empty_warns(caplog):
    with caplog.at_level(logging.WARNING):
        loss = al.depth_order_loss(np.zeros(0), np.zeros(0), np.zeros(0),
                                   np.zeros(0))
    assert loss == 0.0
    assert any("empty" in r.message for r in caplog.records)


def test_depth_order_nonnegative_property():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = rng.integers(1, 8)
        loss = al.depth_order_loss(rng.uniform(0.1, 3, n), rng.uniform(0.1, 3, n),
                                   rng.uniform(0.1, 3, n), rng.uniform(0.1, 3, n))
        assert loss >= 0.0


def test_depth_order_gradient_matches_fd():
    rng = np.random.default_rng(1)
    eh, ef = rng.uniform(0.5, 2, 6), rng.uniform(0.5, 2, 6)
    rh0, rf0 = rng.uniform(0.5, 2, 6), rng.uniform(0.5, 2, 6)

    def f(arrays):
        return al.depth_order_loss(eh, ef, arrays[0], arrays[1])

    fd = finite_diff(f, [rh0, rf0])
    tape = Tape()
    rh, rf = tape.leaf(rh0), tape.leaf(rf0)
    tape.backward(al.depth_order_loss(eh, ef, rh, rf))
    assert_grads_close(rh.grad, fd[0], rtol=1e-4, label="rend_hand")
    assert_grads_close(rf.grad, fd[1], rtol=1e-4, label="rend_face")


# ---------------------------------------------------------------------------
# contact regularization


def test_contact_reg_hand_examples():
    tip = np.array([[0.0, 0.0, 1.0]])
    face = np.array([[0.0, 0.0, 0.0]])
    assert al.contact_reg_loss(tip, face, activation_radius=None) == \
        pytest.approx(1.0)
    assert al.contact_reg_loss(face, face, activation_radius=None) == 0.0
    tips = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]])
    faces = np.zeros((2, 3))
    assert al.contact_reg_loss(tips, faces, activation_radius=None) == \
        pytest.approx(2.5)


def test_contact_reg_gating_drops_far_pairs():
    tips = np.array([[0.0, 0.0, 0.02], [0.0, 0.0, 0.5]])
    faces = np.zeros((2, 3))
    loss = al.contact_reg_loss(tips, faces, activation_radius=0.03)
    assert loss == pytest.approx(0.02 ** 2)
    # all dropped
    assert al.contact_reg_loss(tips[1:], faces[1:], activation_radius=0.03) == 0.0


def test_contact_reg_gradient_points_toward_face():
    # descent direction on a shared hand translation moves the fingertip
    # toward the face vertex centroid
    rng = np.random.default_rng(3)
    tips0 = rng.normal(size=(4, 3)) * 0.005 + np.array([0.0, 0.0, 0.01])
    faces = rng.normal(size=(4, 3)) * 0.002

    def f(arrays):
        return al.contact_reg_loss(tips0 + arrays[0], faces,
                                   activation_radius=None)

    (fd,) = finite_diff(f, [np.zeros(3)])
    tape = Tape()
    t = tape.leaf(np.zeros(3))
    loss = al.contact_reg_loss(ad.add(Tensor(tips0), t), faces,
                               activation_radius=None)
    tape.backward(loss)
    assert_grads_close(t.grad, fd, rtol=1e-4, label="hand translation")
    toward_face = faces.mean(axis=0) - tips0.mean(axis=0)
    assert np.dot(-t.grad, toward_face) > 0.0


# ---------------------------------------------------------------------------
# landmark loss


def test_landmark_loss_examples():
    proj = np.array([[10.0, 20.0], [30.0, 40.0]])
    assert al.landmark_loss(proj, proj) < 1e-12
    shifted = proj + np.array([2.0, 0.0])
    assert al.landmark_loss(shifted, proj) == pytest.approx(4.0)
    single = np.array([[3.0, 4.0]])
    assert al.landmark_loss(single, np.zeros((1, 2))) == pytest.approx(25.0)


def test_landmark_loss_excludes_occluded(caplog):
    proj = np.array([[0.0, 0.0], [100.0, 100.0]])
    obs = np.array([[1.0, 0.0], [0.0, 0.0]])
    occ = np.array([False, True])
    assert al.landmark_loss(proj, obs, occ) == pytest.approx(1.0)
    with caplog.at_level(logging.WARNING):
        assert al.landmark_loss(proj, obs, np.array([True, True])) == 0.0
    assert any("occluded" in r.message for r in caplog.records)


# ---------------------------------------------------------------------------
# smoothness loss


def test_smoothness_examples():
    assert al.smoothness_loss(np.ones((5, 2))) == 0.0
    assert al.smoothness_loss(np.array([[0.0], [1.0]])) == pytest.approx(1.0)
    ramp = np.array([[0.0], [0.5], [1.0]])
    assert al.smoothness_loss(ramp) == pytest.approx(0.25)
    assert al.smoothness_loss(np.zeros((1, 3))) == 0.0


def test_smoothness_channel_weights():
    seq = np.array([[0.0, 0.0], [1.0, 2.0]])
    assert al.smoothness_loss(seq, [1.0, 0.5]) == pytest.approx(1.0 + 0.5 * 4.0)


def test_smoothness_not_permutation_invariant():
    seq = np.array([[0.0], [1.0], [0.1]])
    perm = seq[[0, 2, 1]]
    assert al.smoothness_loss(seq) != al.smoothness_loss(perm)


# ---------------------------------------------------------------------------
# tape kinematics oracle


def test_rodrigues_tape_matches_numpy():
    rng = np.random.default_rng(5)
    aa = rng.normal(scale=0.7, size=(6, 3))
    aa[0] = 0.0   # identity case
    tape = Tape()
    leaf = tape.leaf(aa)
    r_t = al.rodrigues_t(leaf)
    np.testing.assert_allclose(r_t.data, mm.rodrigues(aa), atol=1e-12)

    w = rng.normal(size=r_t.shape)
    tape.backward(ad.tsum(ad.mul(r_t, w)))

    def f(arrays):
        return float((mm.rodrigues(arrays[0]) * w).sum())

    (fd,) = finite_diff(f, [aa])
    assert_grads_close(tape.grad(leaf), fd, rtol=1e-4, label="rodrigues")


# ---------------------------------------------------------------------------
# align_sequence behavior (small scale; the full recovery run lives in the
# acceptance suite)


@pytest.fixture(scope="module")
def small_scene():
    seq = ss.generate_sequence(seed=13, n_frames=8, scenario="cheek-poke")
    gts = [gt for gt, _ in seq.frames]
    obs = [o for _, o in seq.frames]
    return seq, gts, obs


def _zero_noise():
    return ss.NoiseConfig(rot_std=0, joint_std=0, trans_std=0, scale_std=0,
                          expr_std=0, hand_depth_bias=0)


def test_zero_noise_tracks_are_a_fixed_point(small_scene):
    seq, gts, obs = small_scene
    tracks0 = ss.perturb_tracks(gts, _zero_noise(), seed=0, camera=seq.camera)
    cfg = al.AlignConfig(outer_iters=3, inner_iters=4, final_inner_iters=10,
                         report_penetration=False, seed=3)
    tracks1, diag = al.align_sequence(tracks0, obs, seq.camera, seq.head,
                                      seq.hand, cfg)
    for t0, t1 in zip(tracks0, tracks1):
        assert np.abs(t1.face_pose.global_trans
                      - t0.face_pose.global_trans).max() < 1e-4
        assert np.abs(t1.hand_pose.global_trans
                      - t0.hand_pose.global_trans).max() < 1e-4
        assert np.abs(t1.face_pose.global_rot
                      - t0.face_pose.global_rot).max() < 1e-3


def test_alignment_reduces_loss_and_reports(small_scene):
    seq, gts, obs = small_scene
    noise = ss.NoiseConfig(rot_std=0.01, trans_std=0.004, hand_depth_bias=0.01)
    tracks0 = ss.perturb_tracks(gts, noise, seed=2, camera=seq.camera)
    cfg = al.AlignConfig(outer_iters=5, inner_iters=6, final_inner_iters=30,
                         report_penetration=True, penetration_resolution=16,
                         seed=1)
    tracks1, diag = al.align_sequence(tracks0, obs, seq.camera, seq.head,
                                      seq.hand, cfg)
    accepted = [e for e in diag["loss_curve"] if e["accepted"]]
    assert len(accepted) >= 1
    assert accepted[-1]["total"] <= diag["loss_curve"][0]["total"] + 1e-12
    assert 0.0 <= diag["violation_rate"] <= 1.0
    assert len(diag["interpenetration_mm3_per_frame"]) == len(obs)

    # refined hand should not be worse than the noisy initialization
    err0 = np.mean([np.linalg.norm(t.hand_pose.global_trans
                                   - g.hand_pose.global_trans)
                    for t, g in zip(tracks0, gts)])
    err1 = np.mean([np.linalg.norm(t.hand_pose.global_trans
                                   - g.hand_pose.global_trans)
                    for t, g in zip(tracks1, gts)])
    assert err1 < err0


def test_alignment_requires_matching_lengths(small_scene):
    seq, gts, obs = small_scene
    tracks0 = ss.perturb_tracks(gts, _zero_noise(), seed=0)
    with pytest.raises(ValueError):
        al.align_sequence(tracks0[:-1], obs, seq.camera, seq.head, seq.hand,
                          al.AlignConfig(outer_iters=1, inner_iters=1,
                                         final_inner_iters=0,
                                         report_penetration=False))


def test_unsupported_channels_rejected(small_scene):
    seq, gts, obs = small_scene
    tracks0 = ss.perturb_tracks(gts, _zero_noise(), seed=0,
                                optimize={"face_global", "face_theta"})
    with pytest.raises(NotImplementedError):
        al.align_sequence(tracks0, obs, seq.camera, seq.head, seq.hand,
                          al.AlignConfig(outer_iters=1, inner_iters=1,
                                         final_inner_iters=0,
                                         report_penetration=False))


def test_contact_pair_set_validation():
    with pytest.raises(ValueError):
        al.ContactPairSet(fingertip_ids=np.array([1]),
                          face_ids=np.zeros((1, 0), dtype=int))
