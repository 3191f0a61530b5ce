"""Soft (differentiable) and hard (z-buffer) triangle rasterization.

Soft rasterization: the coverage of pixel p by face f is
``sigmoid(sign * d^2(p, f) / gamma)`` with ``d`` the distance from the pixel
center to the projected triangle and ``sign`` = +1 inside, -1 outside. The
silhouette is ``1 - prod_f (1 - coverage_f)``. Colors are barycentric
interpolations of vertex colors mixed with per-pixel weights
``coverage_f * exp(-z_f / sigma_z)`` normalized over the candidate faces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import CameraModel, ego_to_camera, pixel_rays, project
from .mesh import Mesh, MeshPose

NEAR = 0.05
TAIL = 20.0  # sigmoid(-TAIL) ~ 2e-9: faces farther than sqrt(TAIL * gamma) px are skipped
DEFAULT_SIGMA_Z = 0.1

SKY_TOP = np.array([0.55, 0.70, 0.90])
SKY_HORIZON = np.array([0.80, 0.86, 0.92])
GROUND_NEAR = np.array([0.36, 0.38, 0.35])
GROUND_FAR = np.array([0.58, 0.60, 0.57])


def default_gamma(image_size: tuple[int, int]) -> float:
    h, w = image_size
    return 1e-4 * float(h * h + w * w)


@dataclass
class RenderOutput:
    rgb: ad.Tensor   # (H, W, 3)
    mask: ad.Tensor  # (H, W, 1)

    @classmethod
    def empty(cls, image_size) -> "RenderOutput":
        h, w = image_size
        return cls(ad.Tensor(np.zeros((h, w, 3))), ad.Tensor(np.zeros((h, w, 1))))

    @property
    def coverage(self) -> float:
        return float(self.mask.data.sum())


def _pairs(xy: np.ndarray, image_size, pad: float):
    """Candidate (face, pixel) pairs: every pixel within ``pad`` of a face's 2-D bbox."""
    h, w = image_size
    lo = np.ceil(xy.min(axis=1) - pad - 0.5).astype(np.int64)  # first pixel whose center >= min - pad
    hi = np.floor(xy.max(axis=1) + pad - 0.5).astype(np.int64)
    c0, r0 = np.clip(lo[:, 0], 0, w), np.clip(lo[:, 1], 0, h)
    c1, r1 = np.clip(hi[:, 0], -1, w - 1), np.clip(hi[:, 1], -1, h - 1)
    nc = np.maximum(c1 - c0 + 1, 0)
    nr = np.maximum(r1 - r0 + 1, 0)
    counts = nc * nr
    total = int(counts.sum())
    face = np.repeat(np.arange(len(xy)), counts)
    if total == 0:
        return face, face.copy()
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - start
    rr = r0[face] + local // nc[face]
    cc = c0[face] + local % nc[face]
    return face, rr * w + cc


def rasterize_triangles(verts_cam: ad.Tensor, faces: np.ndarray, colors: ad.Tensor, cam: CameraModel,
                        gamma: float | None = None, sigma_z: float = DEFAULT_SIGMA_Z,
                        cull_backfaces: bool = False, tail: float = TAIL) -> RenderOutput:
    """Soft-rasterize camera-frame triangles. ``verts_cam`` (n, 3), ``colors`` (n, 3)."""
    h, w = cam.image_size
    gamma = default_gamma(cam.image_size) if gamma is None else float(gamma)
    z_np = verts_cam.data[:, 2]
    faces = np.asarray(faces, dtype=np.int64)
    keep = np.all(z_np[faces] > NEAR, axis=1)
    faces = faces[keep]
    if len(faces) == 0:
        return RenderOutput.empty(cam.image_size)

    pix, z, _ = project(verts_cam, cam)
    px, py = pix[:, 0], pix[:, 1]
    xy = pix.data[faces]  # (m, 3, 2)
    area2 = ((xy[:, 1, 0] - xy[:, 0, 0]) * (xy[:, 2, 1] - xy[:, 0, 1])
             - (xy[:, 2, 0] - xy[:, 0, 0]) * (xy[:, 1, 1] - xy[:, 0, 1]))
    ok = np.abs(area2) > 1e-12
    if cull_backfaces:
        # outward-wound faces facing the camera appear clockwise in y-down pixel space
        ok &= area2 < 0
    faces, xy, area2 = faces[ok], xy[ok], area2[ok]
    pad = math.sqrt(tail * gamma)
    face_of_pair, pixel_of_pair = _pairs(xy, cam.image_size, pad)
    if len(face_of_pair) == 0:
        return RenderOutput.empty(cam.image_size)

    ia, ib, ic = (faces[face_of_pair, k] for k in range(3))
    qx = (pixel_of_pair % w + 0.5).astype(float)
    qy = (pixel_of_pair // w + 0.5).astype(float)
    xa, ya, xb, yb, xc, yc = px[ia], py[ia], px[ib], py[ib], px[ic], py[ic]

    # squared distance to the triangle boundary: min over the three edge segments
    def seg_d2(x0, y0, x1, y1):
        ex, ey = x1 - x0, y1 - y0
        wx, wy = qx - x0, qy - y0
        t = ad.clamp((wx * ex + wy * ey) / (ex * ex + ey * ey), 0.0, 1.0)
        dx, dy = wx - t * ex, wy - t * ey
        return dx * dx + dy * dy

    d_ab = seg_d2(xa, ya, xb, yb)
    d_bc = seg_d2(xb, yb, xc, yc)
    d_ca = seg_d2(xc, yc, xa, ya)
    d2 = ad.minimum(ad.minimum(d_ab, d_bc), d_ca)

    # barycentric coordinates (screen space)
    a2 = (xb - xa) * (yc - ya) - (xc - xa) * (yb - ya)
    ba = ((xb - qx) * (yc - qy) - (xc - qx) * (yb - qy)) / a2
    bb = ((xc - qx) * (ya - qy) - (xa - qx) * (yc - qy)) / a2
    bc = 1.0 - ba - bb
    inside = (ba.data >= 0) & (bb.data >= 0) & (bc.data >= 0)

    s = ad.where(inside, d2, -d2) * (1.0 / gamma)
    n_pix = h * w
    log_uncovered = ad.segment_sum(ad.log_sigmoid(-s), pixel_of_pair, n_pix)
    mask = 1.0 - ad.exp(log_uncovered)

    ca_, cb_, cc_ = ad.clamp(ba, 0.0, 1.0), ad.clamp(bb, 0.0, 1.0), ad.clamp(bc, 0.0, 1.0)
    norm = ca_ + cb_ + cc_
    ca_, cb_, cc_ = ca_ / norm, cb_ / norm, cc_ / norm
    zp = ca_ * z[ia] + cb_ * z[ib] + cc_ * z[ic]

    logw = ad.log_sigmoid(s) - zp * (1.0 / sigma_z)
    shift = np.full(n_pix, -np.inf)
    np.maximum.at(shift, pixel_of_pair, logw.data)
    wgt = ad.exp(logw - shift[pixel_of_pair])
    denom = ad.segment_sum(wgt, pixel_of_pair, n_pix)
    wgt = wgt / denom[pixel_of_pair]

    col = (ca_.reshape(-1, 1) * colors[ia] + cb_.reshape(-1, 1) * colors[ib]
           + cc_.reshape(-1, 1) * colors[ic])
    rgb = ad.segment_sum(wgt.reshape(-1, 1) * col, pixel_of_pair, n_pix)
    return RenderOutput(rgb.reshape(h, w, 3), mask.reshape(h, w, 1))


def mesh_to_camera(mesh: Mesh, pose: MeshPose, cam: CameraModel) -> ad.Tensor:
    """Local vertices -> ego (identity rotation, translation ``pose.center``) -> camera."""
    return ego_to_camera(pose.apply(mesh.vertices), cam)


def rasterize_soft(mesh: Mesh, pose: MeshPose, cam: CameraModel, gamma: float | None = None,
                   sigma_z: float = DEFAULT_SIGMA_Z, cull_backfaces: bool = False) -> RenderOutput:
    """Differentiable render of one placed mesh; background contributes nothing."""
    return rasterize_triangles(mesh_to_camera(mesh, pose, cam), mesh.faces, mesh.texture, cam,
                               gamma=gamma, sigma_z=sigma_z, cull_backfaces=cull_backfaces)


# ---------------------------------------------------------------------------
# hard z-buffer rendering
# ---------------------------------------------------------------------------

def background(cam: CameraModel, supersample: int = 1) -> np.ndarray:
    """Sky gradient above the horizon, distance-shaded ground plane (z = 0) below."""
    d = pixel_rays(cam, supersample)
    c = cam.center_ego
    img = np.empty(d.shape, dtype=float)
    down = d[..., 2] < -1e-9
    elev = np.clip(d[..., 2:3], 0.0, 1.0)
    img[:] = SKY_HORIZON + (SKY_TOP - SKY_HORIZON) * np.sqrt(elev)
    t = -c[2] / np.where(down, d[..., 2], -1.0)
    gx, gy = c[0] + t * d[..., 0], c[1] + t * d[..., 1]
    dist = np.hypot(gx, gy)
    f = np.clip(dist / 40.0, 0.0, 1.0)[..., None]
    ground = GROUND_NEAR + (GROUND_FAR - GROUND_NEAR) * f
    img[down] = ground[down]
    return img


def _clip_near(tri: np.ndarray) -> list[np.ndarray]:
    """Clip one camera-frame triangle against ``z = NEAR``; returns 0-2 triangles."""
    front = tri[:, 2] > NEAR
    if front.all():
        return [tri]
    if not front.any():
        return []
    poly = []
    for i in range(3):
        a, b = tri[i], tri[(i + 1) % 3]
        fa, fb = a[2] > NEAR, b[2] > NEAR
        if fa:
            poly.append(a)
        if fa != fb:
            t = (NEAR - a[2]) / (b[2] - a[2])
            poly.append(a + t * (b - a))
    return [np.array([poly[0], poly[k], poly[k + 1]]) for k in range(1, len(poly) - 1)]


def zbuffer(tris_cam: np.ndarray, colors: np.ndarray, ids: np.ndarray, cam: CameraModel,
            supersample: int = 1, base: np.ndarray | None = None):
    """Nearest-face-wins rasterization at ``supersample`` x resolution.

    Returns ``(image, depth, id_buffer)`` at the supersampled resolution; depth is
    camera-frame z (inf where empty), ids are -1 where empty.
    """
    h, w = cam.image_size
    s = supersample
    hs, ws = h * s, w * s
    img = np.zeros((hs, ws, 3)) if base is None else base.copy()
    depth = np.full((hs, ws), np.inf)
    idbuf = np.full((hs, ws), -1, dtype=np.int64)
    for tri0, color, oid in zip(tris_cam, colors, ids):
        for tri in _clip_near(np.asarray(tri0, dtype=float)):
            z = tri[:, 2]
            u = (cam.fx * tri[:, 0] / z + cam.cx) * s
            v = (cam.fy * tri[:, 1] / z + cam.cy) * s
            area = (u[1] - u[0]) * (v[2] - v[0]) - (u[2] - u[0]) * (v[1] - v[0])
            if abs(area) < 1e-12:
                continue
            c0 = max(int(math.ceil(u.min() - 0.5)), 0)
            c1 = min(int(math.floor(u.max() - 0.5)), ws - 1)
            r0 = max(int(math.ceil(v.min() - 0.5)), 0)
            r1 = min(int(math.floor(v.max() - 0.5)), hs - 1)
            if c1 < c0 or r1 < r0:
                continue
            qx, qy = np.meshgrid(np.arange(c0, c1 + 1) + 0.5, np.arange(r0, r1 + 1) + 0.5)
            b0 = ((u[1] - qx) * (v[2] - qy) - (u[2] - qx) * (v[1] - qy)) / area
            b1 = ((u[2] - qx) * (v[0] - qy) - (u[0] - qx) * (v[2] - qy)) / area
            b2 = 1.0 - b0 - b1
            inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
            if not inside.any():
                continue
            zq = 1.0 / (b0 / z[0] + b1 / z[1] + b2 / z[2])
            region = depth[r0:r1 + 1, c0:c1 + 1]
            win = inside & (zq < region)
            region[win] = zq[win]
            img[r0:r1 + 1, c0:c1 + 1][win] = color
            idbuf[r0:r1 + 1, c0:c1 + 1][win] = oid
    return img, depth, idbuf


def downsample(img: np.ndarray, s: int) -> np.ndarray:
    if s == 1:
        return img
    hs, ws = img.shape[:2]
    return img.reshape(hs // s, s, ws // s, s, *img.shape[2:]).mean(axis=(1, 3))


# (i, j, k) corner-index triangles of a box, outward wound, with the face normal axis
BOX_TRIANGLES = np.array([
    [0, 2, 3], [0, 3, 1],  # bottom
    [4, 5, 7], [4, 7, 6],  # top
    [0, 1, 5], [0, 5, 4],  # +w side
    [2, 6, 7], [2, 7, 3],  # -w side
    [0, 4, 6], [0, 6, 2],  # rear
    [1, 3, 7], [1, 7, 5],  # front
])
LIGHT = np.array([0.3, 0.2, 0.93]) / np.linalg.norm([0.3, 0.2, 0.93])


def shade_box_faces(corners: np.ndarray, color) -> np.ndarray:
    """Flat shading per triangle from a fixed overhead light."""
    tri = corners[BOX_TRIANGLES]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    k = 0.55 + 0.45 * np.abs(n @ LIGHT)
    return np.clip(np.asarray(color)[None, :] * k[:, None], 0.0, 1.0)


def render_scene_hard(scene, cam: CameraModel, supersample: int = 1,
                      extra=()) -> np.ndarray:
    """Z-buffered flat-shaded proxy cuboids over the sky/ground background, (H, W, 3).

    ``extra`` holds additional ``(tris_ego (k,3,3), colors (k,3), id)`` groups.
    """
    tris, cols, ids = scene_triangles(scene)
    for t, c, i in extra:
        tris = np.concatenate([tris, t])
        cols = np.concatenate([cols, c])
        ids = np.concatenate([ids, np.full(len(t), i)])
    base = background(cam, supersample)
    tris_cam = ego_to_camera(tris.reshape(-1, 3), cam).reshape(-1, 3, 3) if len(tris) else tris
    img, _, _ = zbuffer(tris_cam, cols, ids, cam, supersample, base)
    return downsample(img, supersample)


def scene_triangles(scene):
    """Ego-frame triangles, per-triangle colors and object ids for every proxy cuboid."""
    from .geometry import box_corners

    tris, cols, ids = [], [], []
    for k, obj in enumerate(scene.objects):
        corners = box_corners(obj.box)
        tris.append(corners[BOX_TRIANGLES])
        cols.append(shade_box_faces(corners, obj.color))
        ids.append(np.full(len(BOX_TRIANGLES), k))
    if not tris:
        return np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    return np.concatenate(tris), np.concatenate(cols), np.concatenate(ids)
