import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from meshfat.register import (ReferenceDegeneracyWarning, RegistrationError, RigidTransform,
                              apply_transform, icp, kabsch, read_transform, reference_distances,
                              select_reference, write_transform)
from meshfat.surface import TriangleMesh, decimate, mesh_volume, unit_cube
from meshfat.volume import SubjectLabels


def rigid(deg_xyz, t):
    return RigidTransform(Rotation.from_euler("xyz", deg_xyz, degrees=True).as_matrix(),
                          np.asarray(t, dtype=float))


def vertex_rmsd(a, b):
    return float(np.sqrt(((a - b) ** 2).sum(axis=1).mean()))


@pytest.fixture(scope="module")
def body_mesh(body):
    return decimate(body[2], 1000)


# --- RigidTransform ------------------------------------------------------------

def test_rejects_reflection_and_non_orthonormal():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, 1.001]), np.zeros(3))


def test_transform_json_roundtrip(tmp_path):
    t = rigid((10, 20, 30), (1, 2, 3))
    write_transform(tmp_path / "t.json", t)
    import json

    d = json.loads((tmp_path / "t.json").read_text())
    assert len(d["rotation"]) == 9 and len(d["translation"]) == 3
    assert read_transform(tmp_path / "t.json") == t


@given(st.tuples(*[st.floats(-180, 180)] * 3), st.tuples(*[st.floats(-100, 100)] * 3))
@settings(max_examples=40, deadline=None)
def test_inverse_and_compose(angles, t):
    a = rigid(angles, t)
    p = np.random.default_rng(0).normal(size=(10, 3))
    assert np.allclose(a.inverse().apply(a.apply(p)), p, atol=1e-9)
    b = rigid(angles[::-1], t[::-1])
    assert np.allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-9)


# --- apply_transform ---------------------------------------------------------------

def test_identity_transform():
    m = unit_cube()
    assert apply_transform(m, RigidTransform.identity()) == m


def test_translation():
    m = unit_cube()
    out = apply_transform(m, RigidTransform(np.eye(3), np.array([10.0, 0, 0])))
    assert np.allclose(out.vertices[:, 0], m.vertices[:, 0] + 10)
    assert np.array_equal(out.faces, m.faces)
    assert mesh_volume(out) == pytest.approx(mesh_volume(m), rel=1e-12)


def test_quarter_turn_about_z():
    out = apply_transform(TriangleMesh(np.array([[1.0, 0, 0], [0, 1, 0], [0, 0, 1]]),
                                       np.array([[0, 1, 2]])), rigid((0, 0, 90), (0, 0, 0)))
    assert np.allclose(out.vertices[0], [0, 1, 0], atol=1e-12)


@given(st.tuples(*[st.floats(-180, 180)] * 3), st.tuples(*[st.floats(-1e3, 1e3)] * 3))
@settings(max_examples=40, deadline=None)
def test_distances_and_volume_preserved(angles, t):
    m = unit_cube()
    out = apply_transform(m, rigid(angles, t))
    from scipy.spatial.distance import pdist

    d0, d1 = pdist(m.vertices), pdist(out.vertices)
    assert np.allclose(d1, d0, rtol=1e-9)
    assert mesh_volume(out) == pytest.approx(1.0, rel=1e-9)


# --- kabsch / icp -------------------------------------------------------------------------

def test_kabsch_exact():
    p = np.random.default_rng(1).normal(size=(20, 3))
    t = rigid((5, -40, 70), (3, 4, 5))
    got = kabsch(p, t.apply(p))
    assert np.allclose(got.rotation, t.rotation, atol=1e-10)
    assert np.allclose(got.translation, t.translation, atol=1e-10)


def test_icp_identity(body_mesh):
    rep = icp(body_mesh, body_mesh)
    assert rep.rmsd < 1e-9 and rep.converged
    assert np.allclose(rep.transform.rotation, np.eye(3), atol=1e-9)


def test_icp_recovers_known_transform(body_mesh):
    t = rigid((0, 0, 15), (5, -3, 2))
    target = apply_transform(body_mesh, t)
    rep = icp(body_mesh, target, max_iters=200)
    err = vertex_rmsd(rep.transform.apply(body_mesh.vertices), target.vertices)
    assert err < 1e-6 * body_mesh.bbox_diagonal()


@pytest.mark.parametrize("angles,frac", [((0, 0, 30), 0.1), ((20, -10, 15), 0.05), ((-25, 0, 0), 0.08)])
def test_icp_inverse_within_basin(body_mesh, angles, frac):
    diag = body_mesh.bbox_diagonal()
    t = rigid(angles, np.array([1.0, -1.0, 0.5]) / np.sqrt(2.25) * frac * diag)
    moved = apply_transform(body_mesh, t)
    rep = icp(moved, body_mesh, max_iters=300)
    # recovered transform acts as the inverse of t on the vertices
    err = vertex_rmsd(rep.transform.apply(moved.vertices), body_mesh.vertices)
    assert err < 1e-6 * diag


def test_icp_noise_monotone_over_seeds(body_mesh):
    diag = body_mesh.bbox_diagonal()
    for seed in range(20):
        rng = np.random.default_rng(seed)
        noisy = TriangleMesh(body_mesh.vertices + rng.normal(scale=0.01 * diag / np.sqrt(3),
                                                             size=body_mesh.vertices.shape),
                             body_mesh.faces)
        rep = icp(noisy, body_mesh, max_iters=50)
        assert rep.converged and rep.iterations <= 50
        assert rep.rmsd <= rep.history[0]
        assert np.all(np.diff(rep.history) <= 0)


@given(st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_icp_history_non_increasing(seed):
    rng = np.random.default_rng(seed)
    src = TriangleMesh(rng.normal(size=(30, 3)) * [3, 2, 1], np.array([[0, 1, 2]]))
    dst = TriangleMesh(rng.normal(size=(40, 3)) * [3, 2, 1], np.array([[0, 1, 2]]))
    rep = icp(src, dst, max_iters=30)
    assert np.all(np.diff(rep.history) <= 0) and rep.rmsd >= 0
    assert rep.iterations <= 30


def test_icp_rejects_collinear():
    line = TriangleMesh(np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]]), np.array([[0, 1, 2]]))
    with pytest.raises(RegistrationError):
        icp(line, unit_cube())


def test_icp_argument_checks():
    with pytest.raises(ValueError):
        icp(unit_cube(), unit_cube(), max_iters=0)
    with pytest.raises(ValueError):
        icp(unit_cube(), unit_cube(), tol=0.0)


# --- reference selection ---------------------------------------------------------------

def lab(i, h, w=70.0, a=50.0):
    return SubjectLabels(f"s{i:03d}", 1.0, 1.0, "F", h, w, a)


def test_reference_single_subject():
    # one subject has no spread, so the degeneracy flag is raised too
    with pytest.warns(ReferenceDegeneracyWarning):
        assert select_reference([lab(0, 170)]) == "s000"


def test_reference_middle_height():
    assert select_reference([lab(0, 150), lab(1, 190), lab(2, 170)]) == "s002"


def test_reference_tie_smallest_id():
    assert select_reference([lab(5, 150), lab(2, 190)]) == "s002"


def test_reference_degenerate_warns():
    with pytest.warns(ReferenceDegeneracyWarning):
        assert select_reference([lab(3, 170), lab(1, 170)]) == "s001"


def test_reference_matches_brute_force():
    rng = np.random.default_rng(7)
    cohort = [SubjectLabels(f"s{i:03d}", 1.0, 1.0, "M", *rng.normal([170, 75, 50], [10, 12, 15]))
              for i in range(100)]
    a = np.array([[s.height, s.weight, s.age] for s in cohort])
    z = (a - a.mean(0)) / a.std(0)
    expected = cohort[int(np.argmin(np.linalg.norm(z, axis=1)))].subject_id
    assert select_reference(cohort) == expected


@given(st.lists(st.tuples(st.integers(140, 200), st.integers(40, 120), st.integers(18, 90)),
                min_size=1, max_size=30))
@settings(max_examples=50, deadline=None)
def test_reference_is_a_distance_minimiser(rows):
    cohort = [SubjectLabels(f"s{i:03d}", 1.0, 1.0, "F", *map(float, r)) for i, r in enumerate(rows)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ReferenceDegeneracyWarning)
        ref = select_reference(cohort)
    d, _ = reference_distances(cohort)
    i = [s.subject_id for s in cohort].index(ref)
    assert d[i] <= d.min() * (1 + 1e-12) + 1e-12
