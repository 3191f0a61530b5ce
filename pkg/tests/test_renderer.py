import math

import numpy as np
import pytest
from shapely.geometry import MultiPoint, Point

from advmesh import autodiff as ad
from advmesh.geometry import BBox3D, CameraModel, box_corners, ego_to_camera
from advmesh.mesh import Mesh, MeshPose, make_icosphere
from advmesh.renderer import (BOX_TRIANGLES, background, default_gamma, rasterize_soft, rasterize_triangles,
                              render_scene_hard, zbuffer)
from advmesh.scene import Scene, SceneObject, make_camera_rig


def cam_at(h=64, w=64, f=60.0):
    """Camera frame coincides with the ego frame (identity extrinsics)."""
    K = np.array([[f, 0, w / 2], [0, f, h / 2], [0, 0, 1]])
    return CameraModel(K, np.eye(3), np.zeros(3), (h, w))


def tri_mesh(z, color, half=5.0):
    v = [[-half, -half, z], [half, -half, z], [0.0, half, z]]
    return Mesh(v, [[0, 1, 2]], [color] * 3)


ORIGIN = MeshPose(np.zeros(3))


def test_default_gamma():
    assert default_gamma((256, 704)) == pytest.approx(1e-4 * (256**2 + 704**2))


def test_large_red_triangle_covers_center():
    cam = cam_at()
    out = rasterize_soft(tri_mesh(5.0, [1, 0, 0]), ORIGIN, cam)
    np.testing.assert_allclose(out.rgb.data[32, 32], [1, 0, 0], atol=1e-6)
    assert out.mask.data[32, 32, 0] > 0.99


def test_outside_frustum_has_no_mass():
    cam = cam_at()
    out = rasterize_soft(tri_mesh(5.0, [1, 0, 0], half=0.5), MeshPose([40.0, 0, 0]), cam)
    assert out.mask.data.sum() < 1e-3 * 64 * 64


def test_behind_camera_is_empty():
    out = rasterize_soft(tri_mesh(-5.0, [1, 0, 0]), ORIGIN, cam_at())
    assert out.mask.data.sum() == 0 and out.rgb.data.sum() == 0


def test_stacked_triangles_nearer_dominates():
    cam = cam_at()
    v = [[-5, -5, 5], [5, -5, 5], [0, 5, 5], [-5, -5, 10], [5, -5, 10], [0, 5, 10]]
    m = Mesh(v, [[0, 1, 2], [3, 4, 5]], [[1, 0, 0]] * 3 + [[0, 0, 1]] * 3)
    out = rasterize_soft(m, ORIGIN, cam, sigma_z=0.1)
    r, g, b = out.rgb.data[32, 32]
    # by hand: both faces cover the pixel deeply, so the weights are exp(-z/0.1) normalized
    w_blue = math.exp(-10 / 0.1) / (math.exp(-5 / 0.1) + math.exp(-10 / 0.1))
    assert b == pytest.approx(w_blue, abs=1e-12)
    assert b < 0.05 and r > 0.95


def test_render_in_unit_range():
    m = make_icosphere(0.5, 2)
    m.texture.data = np.random.default_rng(0).uniform(0, 1, m.texture.shape)
    out = rasterize_soft(m, MeshPose([0, 0, 3.0]), cam_at())
    for a in (out.rgb.data, out.mask.data):
        assert a.min() >= 0 and a.max() <= 1 + 1e-12


def test_far_pixels_have_tiny_mask():
    out = rasterize_soft(make_icosphere(0.3, 2), MeshPose([0, 0, 5.0]), cam_at())
    assert out.mask.data[:5, :5].max() < 1e-3


def test_gradients_twelve_vertex_mesh():
    cam = cam_at(16, 16, 16.0)
    ico = make_icosphere(0.5, 0)
    assert ico.n_vertices == 12
    rng = np.random.default_rng(3)
    colors = ad.Tensor(rng.uniform(0.2, 0.8, (12, 3)))
    # jitter so no pixel center sits exactly on a clamp or min kink
    v0 = ico.vertices.data + rng.normal(0, 0.02, (12, 3)) + np.array([0.05, -0.03, 2.5])

    def f(v):
        out = rasterize_triangles(v, ico.faces, colors, cam)
        return out.rgb.sum() + out.mask.sum()

    assert ad.grad_check(f, v0) < 1e-3


def test_texture_gradient():
    cam = cam_at(16, 16, 16.0)
    ico = make_icosphere(0.5, 0)
    verts = ad.Tensor(ico.vertices.data + np.array([0, 0, 2.5]))
    t0 = np.random.default_rng(4).uniform(0.2, 0.8, (12, 3))
    assert ad.grad_check(lambda t: rasterize_triangles(verts, ico.faces, t, cam).rgb.sum(), t0) < 1e-4


def test_translation_equivariance():
    cam = cam_at(64, 64, 60.0)
    m = make_icosphere(0.3, 2)
    z = 5.0
    base = rasterize_soft(m, MeshPose([0, 0, z]), cam).mask.data[..., 0]
    r0, c0 = np.unravel_index(np.argmax(base), base.shape)
    for k in (3, 7):
        moved = rasterize_soft(m, MeshPose([k * z / 60.0, 0, z]), cam).mask.data[..., 0]
        r1, c1 = np.unravel_index(np.argmax(moved), moved.shape)
        assert abs((c1 - c0) - k) <= 1 and abs(r1 - r0) <= 1


def test_mask_mass_monotone_in_gamma():
    cam = cam_at()
    m = make_icosphere(0.5, 2)
    masses = [rasterize_soft(m, MeshPose([0, 0, 4.0]), cam, gamma=g).mask.data.sum()
              for g in (0.01, 0.1, 0.5, 2.0, 8.0)]
    assert all(b >= a - 1e-9 for a, b in zip(masses, masses[1:]))


def _silhouette_oracle(verts_cam, cam):
    pts = np.stack([cam.fx * verts_cam[:, 0] / verts_cam[:, 2] + cam.cx,
                    cam.fy * verts_cam[:, 1] / verts_cam[:, 2] + cam.cy], 1)
    hull = MultiPoint([tuple(p) for p in pts]).convex_hull
    h, w = cam.image_size
    return np.array([[hull.contains(Point(c + 0.5, r + 0.5)) for c in range(w)] for r in range(h)])


def test_soft_mask_converges_to_silhouette():
    cam = cam_at(48, 48, 45.0)
    m = make_icosphere(0.5, 2)
    pose = MeshPose([0.1, -0.05, 3.0])
    soft = rasterize_soft(m, pose, cam, gamma=1e-6).mask.data[..., 0] > 0.5
    oracle = _silhouette_oracle(m.vertices.data + pose.center, cam)
    assert np.mean(soft == oracle) > 0.99


def test_candidate_pruning_matches_exhaustive():
    cam = cam_at(32, 32, 30.0)
    m = make_icosphere(0.5, 1)
    m.texture.data = np.random.default_rng(1).uniform(0, 1, m.texture.shape)
    v = ad.Tensor(m.vertices.data + np.array([0, 0, 3.0]))
    a = rasterize_triangles(v, m.faces, m.texture, cam)
    b = rasterize_triangles(v, m.faces, m.texture, cam, tail=1e4)
    np.testing.assert_allclose(a.mask.data, b.mask.data, atol=1e-6)
    # rgb is normalized per pixel, so only its mask-weighted product is comparable far from faces
    np.testing.assert_allclose(a.rgb.data * a.mask.data, b.rgb.data * b.mask.data, atol=1e-6)


def test_backface_culling_keeps_silhouette():
    cam = cam_at()
    m = make_icosphere(0.5, 2)
    pose = MeshPose([0, 0, 4.0])
    full = rasterize_soft(m, pose, cam).mask.data
    culled = rasterize_soft(m, pose, cam, cull_backfaces=True).mask.data
    assert np.mean(np.abs(full - culled) < 0.05) > 0.98


# -- hard rendering -----------------------------------------------------------

def rig_cam(size=(64, 176)):
    return make_camera_rig(image_size=size)[0]  # looks along ego +x


def test_empty_scene_is_background():
    cam = rig_cam()
    img = render_scene_hard(Scene("e", [cam], []), cam)
    np.testing.assert_array_equal(img, background(cam))


def test_cuboid_silhouette_matches_polygon_oracle():
    cam = rig_cam()
    box = BBox3D((12, 1.0, 0.75), (4, 2, 1.5), 0.5)
    tris = ego_to_camera(box_corners(box)[BOX_TRIANGLES].reshape(-1, 3), cam).reshape(-1, 3, 3)
    _, _, ids = zbuffer(tris, np.zeros((12, 3)), np.zeros(12, dtype=np.int64), cam)
    count = np.count_nonzero(ids == 0)
    # oracle: 4x supersampled point-in-hull of the projected corners
    pc = ego_to_camera(box_corners(box), cam)
    uv = np.stack([cam.fx * pc[:, 0] / pc[:, 2] + cam.cx, cam.fy * pc[:, 1] / pc[:, 2] + cam.cy], 1)
    hull = MultiPoint([tuple(p) for p in uv]).convex_hull
    s = 4
    xs, ys = np.meshgrid((np.arange(176 * s) + 0.5) / s, (np.arange(64 * s) + 0.5) / s)
    lo, hi = hull.bounds[:2], hull.bounds[2:]
    sel = (xs >= lo[0]) & (xs <= hi[0]) & (ys >= lo[1]) & (ys <= hi[1])
    inside = sum(hull.contains(Point(x, y)) for x, y in zip(xs[sel], ys[sel]))
    assert count > 0
    assert abs(count - inside / s**2) <= 0.02 * count


def test_nearer_cuboid_wins_center():
    cam = rig_cam()
    near = SceneObject(BBox3D((8, 0, 1.6), (1, 1, 1)), (1.0, 0.0, 0.0))
    far = SceneObject(BBox3D((15, 0, 1.6), (3, 3, 3)), (0.0, 0.0, 1.0))
    for objs in ([near, far], [far, near]):
        img = render_scene_hard(Scene("t", [cam], objs), cam)
        px = img[32, 88]
        assert px[0] > 0.5 and px[2] == 0.0


def test_hard_render_deterministic():
    cam = rig_cam()
    sc = Scene("t", [cam], [SceneObject(BBox3D((9, -1, 0.8), (4, 2, 1.6), 0.3), (0.2, 0.3, 0.7))])
    assert np.array_equal(render_scene_hard(sc, cam), render_scene_hard(sc, cam))
