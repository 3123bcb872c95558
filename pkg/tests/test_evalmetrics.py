import numpy as np
import pytest

from contactavatar import evalmetrics as ev
from contactavatar.evalmetrics import TriangleMesh


def sphere_field(radius, center=(0.0, 0.0, 0.0)):
    center = np.asarray(center)

    def f(pts):
        return radius - np.linalg.norm(pts - center, axis=1)

    return f


def make_square(z=0.0, size=1.0, flip=False):
    s = size / 2.0
    verts = np.array([[-s, -s, z], [s, -s, z], [s, s, z], [-s, s, z]])
    faces = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int64)
    if flip:
        faces = faces[:, ::-1]
    return TriangleMesh(vertices=verts, faces=faces)


@pytest.fixture(scope="module")
def sphere_mesh():
    bounds = (np.array([-0.15, -0.15, -0.15]), np.array([0.15, 0.15, 0.15]))
    return ev.marching_cubes(sphere_field(0.1), resolution=128, bounds=bounds)


def test_marching_cubes_sphere_radius_error(sphere_mesh):
    cell = 0.3 / 128
    r = np.linalg.norm(sphere_mesh.vertices, axis=1)
    assert np.abs(r - 0.1).max() < 2.0 * cell
    assert not sphere_mesh.boundary_contact


def test_marching_cubes_no_crossing_gives_empty_mesh():
    bounds = (np.array([1.0, 1.0, 1.0]), np.array([2.0, 2.0, 2.0]))
    mesh = ev.marching_cubes(sphere_field(0.1), resolution=16, bounds=bounds)
    assert mesh.is_empty


def test_marching_cubes_refinement_reduces_radius_error():
    bounds = (np.array([-0.15] * 3), np.array([0.15] * 3))
    errs = []
    for res in (32, 64):
        mesh = ev.marching_cubes(sphere_field(0.1), resolution=res, bounds=bounds)
        r = np.linalg.norm(mesh.vertices, axis=1)
        errs.append(float(np.abs(r - 0.1).mean()))
    assert errs[1] < errs[0]


def test_marching_cubes_sphere_is_watertight(sphere_mesh):
    assert sphere_mesh.euler_characteristic() == 2


def test_marching_cubes_deterministic():
    bounds = (np.array([-0.15] * 3), np.array([0.15] * 3))
    m1 = ev.marching_cubes(sphere_field(0.1), resolution=32, bounds=bounds)
    m2 = ev.marching_cubes(sphere_field(0.1), resolution=32, bounds=bounds)
    np.testing.assert_array_equal(m1.vertices, m2.vertices)
    np.testing.assert_array_equal(m1.faces, m2.faces)


def test_marching_cubes_boundary_warning_flag():
    bounds = (np.array([-0.05] * 3), np.array([0.05] * 3))
    mesh = ev.marching_cubes(sphere_field(0.1, center=(0.04, 0, 0)),
                             resolution=16, bounds=bounds)
    assert mesh.boundary_contact


def test_chamfer_identical_meshes_is_zero(sphere_mesh):
    assert ev.chamfer_distance(sphere_mesh, sphere_mesh, 5000, seed=1) == 0.0


def test_chamfer_parallel_planes():
    a = make_square(z=0.0)
    b = make_square(z=0.001)
    cd = ev.chamfer_distance(a, b, n_samples=20000, seed=0)
    assert cd == pytest.approx(1.0, rel=0.02)


def test_chamfer_symmetric():
    a = make_square(z=0.0)
    b = make_square(z=0.004, size=0.7)
    cd_ab = ev.chamfer_distance(a, b, 10000, seed=3)
    cd_ba = ev.chamfer_distance(b, a, 10000, seed=3)
    assert cd_ab == pytest.approx(cd_ba, rel=1e-9)


def test_f_score_examples():
    a = make_square(z=0.0)
    assert ev.f_score(a, a, tau_mm=1.0, n_samples=5000, seed=0) == 100.0
    b = make_square(z=0.006)
    assert ev.f_score(a, b, tau_mm=5.0, n_samples=5000, seed=0) == 0.0
    assert ev.f_score(a, b, tau_mm=10.0, n_samples=5000, seed=0) == 100.0


def test_f_score_symmetric_and_monotone():
    a = make_square(z=0.0)
    b = make_square(z=0.003, size=0.8)
    f5 = ev.f_score(a, b, 5.0, 8000, seed=2)
    f5_rev = ev.f_score(b, a, 5.0, 8000, seed=2)
    assert f5 == pytest.approx(f5_rev, abs=1e-9)
    f2 = ev.f_score(a, b, 2.0, 8000, seed=2)
    assert f2 <= f5 + 1e-9


def test_normal_consistency_examples():
    a = make_square(z=0.0)
    assert ev.normal_consistency(a, a, 4000, seed=0) == pytest.approx(100.0)
    # same plane rotated 90 degrees about an in-plane axis: orthogonal normals
    rot = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    b = TriangleMesh(vertices=a.vertices @ rot.T, faces=a.faces.copy())
    nc = ev.normal_consistency(a, b, 4000, seed=0)
    assert nc < 12.0


def test_normal_consistency_orientation_flip_invariant():
    a = make_square(z=0.0)
    flipped = make_square(z=0.0, flip=True)
    nc = ev.normal_consistency(a, flipped, 4000, seed=1)
    assert nc == pytest.approx(100.0)


def _lens_volume(r1, r2, d):
    # closed-form sphere-sphere intersection volume
    return (np.pi * (r1 + r2 - d) ** 2
            * (d * d + 2 * d * (r1 + r2) - 3 * (r1 - r2) ** 2) / (12 * d))


def test_interpenetration_volume_lens_oracle():
    r1, r2, d = 0.05, 0.04, 0.07
    face = sphere_field(r1)
    center2 = np.array([d, 0.0, 0.0])

    def hand_occ(pts):
        inside = np.linalg.norm(pts - center2, axis=1) < r2
        return inside.astype(np.float64)

    bounds = (np.array([-0.06, -0.06, -0.06]), np.array([0.12, 0.06, 0.06]))
    vol = ev.interpenetration_volume(face, hand_occ, bounds, resolution=128)
    expected = _lens_volume(r1, r2, d) * 1e9
    assert vol == pytest.approx(expected, rel=0.05)


def test_interpenetration_volume_zero_when_apart():
    face = sphere_field(0.05)

    def hand_occ(pts):
        return np.zeros(len(pts))

    bounds = (np.array([-0.06] * 3), np.array([0.06] * 3))
    assert ev.interpenetration_volume(face, hand_occ, bounds, 32) == 0.0


def test_interpenetration_monotone_in_depth():
    r1, r2 = 0.05, 0.04
    face = sphere_field(r1)
    bounds = (np.array([-0.06, -0.06, -0.06]), np.array([0.12, 0.06, 0.06]))
    vols = []
    for d in (0.08, 0.06, 0.045):
        center2 = np.array([d, 0.0, 0.0])

        def hand_occ(pts, c=center2):
            return (np.linalg.norm(pts - c, axis=1) < r2).astype(np.float64)

        vols.append(ev.interpenetration_volume(face, hand_occ, bounds, 64))
    assert vols[0] <= vols[1] <= vols[2]


def test_mesh_export_round_trip(tmp_path, sphere_mesh):
    obj_path = tmp_path / "m.obj"
    ev.save_obj(obj_path, sphere_mesh)
    loaded = ev.load_obj(obj_path)
    assert len(loaded.vertices) == len(sphere_mesh.vertices)
    np.testing.assert_allclose(loaded.vertices, sphere_mesh.vertices, atol=1e-8)
    np.testing.assert_array_equal(loaded.faces, sphere_mesh.faces)

    stl_path = tmp_path / "m.stl"
    ev.save_stl(stl_path, sphere_mesh)
    raw = stl_path.read_bytes()
    (count,) = np.frombuffer(raw[80:84], dtype="<u4")
    assert count == len(sphere_mesh.faces)
    assert len(raw) == 84 + 50 * count


def test_resolution_floor_enforced():
    with pytest.raises(ValueError):
        ev.marching_cubes(sphere_field(0.1), resolution=8,
                          bounds=(np.zeros(3), np.ones(3)))
