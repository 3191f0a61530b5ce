import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advmesh.geometry import BBox3D, box_corners, points_in_box
from advmesh.mesh import (Mesh, MeshError, MeshPose, PlacementError, init_primitive, intersects_box, load_obj,
                          local_direction, make_icosphere, max_extent, offset_center, outward_direction, place,
                          save_obj)

PAPER_COUNTS = {"cube": (726, 1200), "sphere": (2562, 5120), "cylinder": (1642, 3240)}


@pytest.mark.parametrize("shape", sorted(PAPER_COUNTS))
def test_primitive_counts_within_two_percent(shape):
    m = init_primitive(shape)
    nv, nf = PAPER_COUNTS[shape]
    assert abs(m.n_vertices - nv) <= 0.02 * nv
    assert abs(m.n_faces - nf) <= 0.02 * nf


def test_cube_and_sphere_exact_counts():
    cube, sphere = init_primitive("cube"), init_primitive("sphere")
    assert (cube.n_vertices, cube.n_faces) == (726, 1200)
    assert (sphere.n_vertices, sphere.n_faces) == (2562, 5120)


def test_primitive_sizes():
    cube = init_primitive("cube").vertices.data
    np.testing.assert_allclose(cube.max(0) - cube.min(0), [0.9] * 3)
    sph = init_primitive("sphere").vertices.data
    np.testing.assert_allclose(np.linalg.norm(sph, axis=1), 0.5)
    cyl = init_primitive("cylinder").vertices.data
    assert np.linalg.norm(cyl[:, :2], axis=1).max() == pytest.approx(0.3)
    assert cyl[:, 2].max() - cyl[:, 2].min() == pytest.approx(2.0)


@pytest.mark.parametrize("shape", sorted(PAPER_COUNTS))
def test_primitive_texture_and_validity(shape):
    m = init_primitive(shape)
    assert np.all(m.texture.data == 0.5)
    f = m.faces
    assert f.min() >= 0 and f.max() < m.n_vertices
    assert np.all((f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2]))


@pytest.mark.parametrize("shape", sorted(PAPER_COUNTS))
def test_primitive_outward_winding(shape):
    m = init_primitive(shape)
    v = m.vertices.data[m.faces]
    normal = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    centroid = v.mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", normal, centroid) > 0)


@pytest.mark.parametrize("shape", sorted(PAPER_COUNTS))
def test_primitive_deterministic(shape):
    a, b = init_primitive(shape), init_primitive(shape)
    assert np.array_equal(a.vertices.data, b.vertices.data)
    assert np.array_equal(a.faces, b.faces)


def test_unknown_primitive():
    with pytest.raises(ValueError):
        init_primitive("torus")


def test_max_extent_examples():
    assert max_extent(make_icosphere(radius=1.0, subdivisions=2), [0.6, 0.8, 0.0]) == pytest.approx(1.0, abs=0.05)
    assert max_extent(make_icosphere(radius=1.0, subdivisions=2), [1.0, 0, 0]) == pytest.approx(1.0)
    assert max_extent(init_primitive("cube"), [0, 1.0, 0]) == pytest.approx(0.45)
    assert max_extent(init_primitive("cylinder"), [0, 0, 1.0]) == pytest.approx(1.0)
    assert max_extent(init_primitive("cylinder"), [0, -1.0, 0]) == pytest.approx(0.3)


def test_max_extent_rejects_non_unit():
    with pytest.raises(ValueError):
        max_extent(init_primitive("cube"), [1.0, 1.0, 0])


def test_mesh_validation():
    with pytest.raises(MeshError):
        Mesh(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(MeshError):
        Mesh(np.eye(3), [[0, 1, 3]])
    with pytest.raises(MeshError):
        Mesh(np.eye(3), [[0, 1, 1]])


def test_pose_rotation_must_be_identity():
    with pytest.raises(ValueError):
        MeshPose(np.zeros(3), np.diag([1.0, -1.0, -1.0]))


# -- placement -----------------------------------------------------------------

def test_center_rule_raw_formula():
    # corner b_1 of the reference box, extent 0.5, unit offset -y
    b1 = box_corners(BBox3D((0, 0, 0), (4, 2, 1.5)))[0]
    np.testing.assert_allclose(offset_center(b1, 0.5, [0, -1, 0], 0.0), [-2, 0.5, -0.75])
    np.testing.assert_allclose(offset_center(b1, 0.5, [0, -1, 0], 0.1), [-2, 0.4, -0.75])


def test_place_sphere_outward():
    sphere = init_primitive("sphere")
    box = BBox3D((0, 0, 0), (4, 2, 1.5))
    pose = place(sphere, box, 0, [0, 1.0, 0], 0.1)
    np.testing.assert_allclose(pose.center, [-2, 1.6, -0.75])
    assert not intersects_box(sphere, pose, box)


def test_place_rejects_inward_direction():
    # -y from corner 0 enters the box
    with pytest.raises(PlacementError):
        place(init_primitive("sphere"), BBox3D((0, 0, 0), (4, 2, 1.5)), 0, [0, -1.0, 0], 0.0)


@pytest.mark.parametrize("d", [-0.1, 3.01, 5.0])
def test_place_rejects_bad_distance(d):
    with pytest.raises(PlacementError):
        place(init_primitive("sphere"), BBox3D((0, 0, 0), (4, 2, 1.5)), 0, [0, 1.0, 0], d)


def test_place_accepts_largest_evaluated_distance():
    box = BBox3D((0, 0, 0), (4, 2, 1.5))
    pose = place(init_primitive("sphere"), box, 0, [0, 1.0, 0], 3.0)
    np.testing.assert_allclose(pose.center, [-2, 4.5, -0.75])


def test_place_gap_equals_d():
    cube = init_primitive("cube")
    box = BBox3D((3, -1, 0.75), (4, 2, 1.5), 0.4)
    n = local_direction(box, outward_direction(0, "width"))
    corner = box_corners(box)[0]
    for d in (0.05, 0.3, 1.0):
        pose = place(cube, box, 0, n, d)
        gap = np.min((cube.vertices.data + pose.center - corner) @ n)
        assert gap == pytest.approx(d, abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(0.5, 6), st.floats(0.5, 3), st.floats(0.5, 3),
       st.floats(-math.pi, math.pi), st.integers(0, 7), st.sampled_from(["length", "width", "height"]),
       st.sampled_from([0.0, 0.1, 0.5, 1.0]), st.sampled_from(["cube", "cylinder"]))
def test_place_never_intersects(x, y, l, w, h, yaw, corner, axis, d, shape):
    mesh = _shapes(shape)
    box = BBox3D((x, y, h / 2), (l, w, h), yaw)
    n = local_direction(box, outward_direction(corner, axis))
    pose = place(mesh, box, corner, n, d)
    assert not np.any(points_in_box(mesh.vertices.data + pose.center, box, strict=True))


_CACHE: dict[str, Mesh] = {}


def _shapes(name):
    if name not in _CACHE:
        _CACHE[name] = init_primitive(name)
    return _CACHE[name]


# -- clamping ------------------------------------------------------------------

def test_clamp_displacement_examples():
    m = init_primitive("cube")
    m.vertices.data[0, 0] += 0.25
    m.vertices.data[1, 1] += 0.05
    m.texture.data[2, 0] = 1.3
    m.clamp_displacement(0.1)
    assert m.vertices.data[0, 0] - m.base_vertices[0, 0] == pytest.approx(0.1)
    assert m.vertices.data[1, 1] - m.base_vertices[1, 1] == pytest.approx(0.05)
    assert m.texture.data[2, 0] == 1.0


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 0.5), st.integers(0, 2**32 - 1))
def test_clamp_bounds_hold(cap, seed):
    m = make_icosphere(subdivisions=1)
    rng = np.random.default_rng(seed)
    m.vertices.data += rng.normal(0, 1, m.vertices.shape)
    m.texture.data += rng.normal(0, 1, m.texture.shape)
    m.clamp_displacement(cap)
    assert m.max_displacement() <= cap + 1e-12
    assert m.texture.data.min() >= 0 and m.texture.data.max() <= 1


def test_clamp_rejects_nonpositive_cap():
    with pytest.raises(ValueError):
        init_primitive("cube").clamp_displacement(0.0)


# -- OBJ -------------------------------------------------------------------------

def test_obj_roundtrip(tmp_path):
    m = init_primitive("cube")
    m.vertices.data += np.random.default_rng(0).normal(0, 0.01, m.vertices.shape)
    m.texture.data = np.random.default_rng(1).uniform(0, 1, m.texture.shape)
    save_obj(m, tmp_path / "c.obj")
    back = load_obj(tmp_path / "c.obj")
    assert back.n_vertices == m.n_vertices and np.array_equal(back.faces, m.faces)
    assert np.max(np.abs(back.vertices.data - m.vertices.data)) < 1e-6
    assert np.max(np.abs(back.texture.data - m.texture.data)) < 1e-6


def test_obj_quad_face_names_line(tmp_path):
    p = tmp_path / "q.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(MeshError, match=":5:"):
        load_obj(p)


def test_obj_empty_file(tmp_path):
    p = tmp_path / "e.obj"
    p.write_text("")
    with pytest.raises(MeshError, match="no vertices"):
        load_obj(p)


def test_obj_malformed_line(tmp_path):
    p = tmp_path / "m.obj"
    p.write_text("v 0 0 0\nv 1 zero 0\n")
    with pytest.raises(MeshError, match=":2:"):
        load_obj(p)


def test_obj_plain_vertices_get_gray(tmp_path):
    p = tmp_path / "g.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    m = load_obj(p)
    assert np.all(m.texture.data == 0.5)
