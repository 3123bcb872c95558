import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contactavatar import morphable as mm
from contactavatar.morphable import (ExpressionParams, ModelError,
                                     MorphableModel, PointBlendAttributes,
                                     PoseParams)


@pytest.fixture(scope="module")
def head():
    return mm.make_toy_head()


@pytest.fixture(scope="module")
def hand():
    return mm.make_toy_hand()


def _single_joint_model():
    """One joint at the origin, two fully skinned vertices."""
    template = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    return MorphableModel(
        template=template,
        faces=np.array([[0, 1, 0]], dtype=np.int64),
        expr_basis=np.zeros((0, 2, 3)),
        pose_basis=np.zeros((1, 9, 2, 3)),
        weights=np.ones((2, 1)),
        joint_regressor=np.array([[0.5, 0.5]]),
        parents=np.array([-1], dtype=np.int64),
        landmarks=np.array([0], dtype=np.int64),
        fingertips=np.zeros(0, dtype=np.int64),
        contact_verts=np.zeros(0, dtype=np.int64),
    )


def test_rest_configuration_returns_template(head):
    pose = PoseParams.identity(head.n_joints)
    expr = ExpressionParams.zeros(head.n_expr)
    v = mm.lbs_forward(head, pose, expr)
    np.testing.assert_allclose(v, head.template, atol=1e-12)


def test_pure_global_translation_shifts_all_vertices(head):
    t = np.array([0.01, -0.02, 0.3])
    pose = PoseParams(theta=np.zeros(15), global_trans=t)
    v = mm.lbs_forward(head, pose, ExpressionParams.zeros(head.n_expr))
    np.testing.assert_allclose(v, head.template + t, atol=1e-12)


def test_single_joint_quarter_turn_about_z():
    model = _single_joint_model()
    pose = PoseParams(theta=np.array([0.0, 0.0, np.pi / 2]))
    v = mm.lbs_forward(model, pose, ExpressionParams.zeros(0))
    np.testing.assert_allclose(v[0], [0.0, 1.0, 0.0], atol=1e-12)


def test_rigid_equivariance(head):
    rng = np.random.default_rng(42)
    theta = 0.2 * rng.normal(size=15)
    psi = 0.4 * rng.normal(size=head.n_expr)
    rot = 0.5 * rng.normal(size=3)
    trans = rng.normal(size=3)
    base = PoseParams(theta=theta)
    posed = mm.lbs_forward(head, base, ExpressionParams(psi))
    moved = mm.lbs_forward(
        head, PoseParams(theta=theta, global_rot=rot, global_trans=trans,
                         scale=1.3),
        ExpressionParams(psi))
    r = mm.rodrigues(rot)
    np.testing.assert_allclose(moved, 1.3 * posed @ r.T + trans, atol=1e-9)


def test_inverse_lbs_identity(head):
    pose = PoseParams.identity(head.n_joints)
    expr = ExpressionParams.zeros(head.n_expr)
    attrs = PointBlendAttributes(E=np.zeros((head.n_expr, 3)),
                                 P=np.zeros((head.n_joints, 9, 3)),
                                 W=np.eye(head.n_joints)[0])
    x_d = np.array([0.01, 0.02, -0.03])
    x_c = mm.inverse_lbs(head, x_d, attrs, pose, expr)
    np.testing.assert_allclose(x_c, x_d, atol=1e-12)


def test_inverse_lbs_undoes_global_translation(head):
    t = np.array([0.05, -0.01, 0.2])
    pose = PoseParams(theta=np.zeros(15), global_trans=t)
    expr = ExpressionParams.zeros(head.n_expr)
    attrs = PointBlendAttributes(E=np.zeros((head.n_expr, 3)),
                                 P=np.zeros((head.n_joints, 9, 3)),
                                 W=np.eye(head.n_joints)[0])
    x_d = np.array([0.01, 0.02, -0.03])
    np.testing.assert_allclose(mm.inverse_lbs(head, x_d, attrs, pose, expr),
                               x_d - t, atol=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_forward_then_inverse_round_trip(head, seed):
    rng = np.random.default_rng(seed)
    pose = PoseParams(theta=0.25 * rng.normal(size=15),
                      global_rot=0.4 * rng.normal(size=3),
                      global_trans=0.1 * rng.normal(size=3),
                      scale=float(np.exp(0.1 * rng.normal())))
    expr = ExpressionParams(0.5 * rng.normal(size=head.n_expr))
    vid = int(rng.integers(0, head.n_verts))
    attrs = mm.vertex_attributes(head, vid)
    offset = 0.002 * rng.normal(size=3)
    x_c = head.template[vid]
    x_d = mm.forward_point(head, x_c, attrs, pose, expr, nonrigid_offset=offset)
    back = mm.inverse_lbs(head, x_d, attrs, pose, expr, nonrigid_offset=offset)
    np.testing.assert_allclose(back, x_c, atol=1e-9)


def test_blendshape_offset_examples():
    basis = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    np.testing.assert_array_equal(mm.blendshape_offset(basis, [0.0, 0.0]),
                                  np.zeros(3))
    np.testing.assert_array_equal(mm.blendshape_offset(basis, [0.0, 1.0]),
                                  basis[1])
    np.testing.assert_array_equal(mm.blendshape_offset(basis, [2.0, -1.0]),
                                  [2.0, -1.0, 0.0])
    with pytest.raises(ModelError):
        mm.blendshape_offset(basis, [1.0, 2.0, 3.0])


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=25, deadline=None)
def test_blendshape_offset_linearity(seed):
    rng = np.random.default_rng(seed)
    basis = rng.normal(size=(6, 3))
    c1, c2 = rng.normal(size=6), rng.normal(size=6)
    a, b = rng.normal(size=2)
    lhs = mm.blendshape_offset(basis, a * c1 + b * c2)
    rhs = (a * mm.blendshape_offset(basis, c1)
           + b * mm.blendshape_offset(basis, c2))
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_nearest_vertex_at_vertex_and_tie_break(head):
    pose = PoseParams.identity(head.n_joints)
    expr = ExpressionParams.zeros(head.n_expr)
    posed = mm.lbs_forward(head, pose, expr)
    attrs = mm.nearest_vertex_attributes(head, posed[17], pose, expr,
                                         posed_verts=posed)
    np.testing.assert_array_equal(attrs.W, head.weights[17])

    # equidistant query: lower index wins
    verts = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [1.0, 5.0, 0.0]])
    ids = mm.nearest_vertex_ids(verts, np.array([[1.0, 0.0, 0.0]]))
    assert ids[0] == 0


def test_nearest_vertex_matches_exhaustive_scan(head):
    rng = np.random.default_rng(3)
    pose = PoseParams(theta=0.1 * rng.normal(size=15))
    expr = ExpressionParams(0.3 * rng.normal(size=head.n_expr))
    posed = mm.lbs_forward(head, pose, expr)
    for _ in range(20):
        x = rng.normal(scale=0.08, size=3)
        best, best_d = 0, np.inf
        for i in range(head.n_verts):      # independent O(V) scan
            d = float(((posed[i] - x) ** 2).sum())
            if d < best_d:
                best, best_d = i, d
        assert mm.nearest_vertex_ids(posed, x[None])[0] == best


def test_toy_models_deterministic_per_seed():
    a = mm.make_toy_head(mm.ToyHeadConfig(seed=5))
    b = mm.make_toy_head(mm.ToyHeadConfig(seed=5))
    np.testing.assert_array_equal(a.template, b.template)
    np.testing.assert_array_equal(a.expr_basis, b.expr_basis)
    np.testing.assert_array_equal(a.weights, b.weights)
    c = mm.make_toy_head(mm.ToyHeadConfig(seed=6))
    assert not np.array_equal(a.expr_basis, c.expr_basis)

    ha = mm.make_toy_hand(mm.ToyHandConfig(seed=2))
    hb = mm.make_toy_hand(mm.ToyHandConfig(seed=2))
    np.testing.assert_array_equal(ha.template, hb.template)


def test_skinning_rows_sum_to_one(head, hand):
    for model in (head, hand):
        np.testing.assert_allclose(model.weights.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(model.weights >= 0.0)


def test_jaw_rotation_only_moves_lower_face(head):
    jaw_col = head.weights[:, 2]
    upper = head.template[:, 1] > 0.02
    assert np.all(jaw_col[upper] < 1e-6)

    theta = np.zeros(15)
    theta[2 * 3] = 0.3   # jaw joint, x-axis
    moved = mm.lbs_forward(head, PoseParams(theta=theta),
                           ExpressionParams.zeros(head.n_expr))
    disp = np.linalg.norm(moved - head.template, axis=1)
    assert disp.max() > 1e-3            # the jaw actually moves
    assert np.all(disp[upper] < 1e-6)   # upper face does not


def test_fingertip_indices_marked(hand):
    assert len(hand.fingertips) == 5
    tips = hand.template[hand.fingertips]
    assert np.all(tips[:, 2] > 0.01)    # tips extend past the palm


def test_landmark_indices_stable(head):
    again = mm.make_toy_head()
    np.testing.assert_array_equal(head.landmarks, again.landmarks)


def test_model_file_round_trip(tmp_path, hand):
    path = tmp_path / "hand.json"
    mm.save_model(path, hand)
    loaded = mm.load_model(path)
    np.testing.assert_array_equal(loaded.template, hand.template)
    np.testing.assert_array_equal(loaded.faces, hand.faces)
    np.testing.assert_array_equal(loaded.weights, hand.weights)
    np.testing.assert_array_equal(loaded.fingertips, hand.fingertips)
    assert loaded.kind == "hand"


def test_invalid_scale_rejected():
    with pytest.raises(ModelError):
        PoseParams(theta=np.zeros(3), scale=0.0)
