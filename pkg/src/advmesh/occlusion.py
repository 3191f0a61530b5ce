"""Occlusion-aware compositing of a rendered mesh into a raw camera image.

Annotated objects whose 2-D boxes overlap the mesh's 2-D box and whose nearest
corner is closer to the camera than the mesh's nearest vertex are treated as
occluders. Their segmentation masks are carved out of the mesh's soft mask
before alpha blending.
"""

from __future__ import annotations

import os
from typing import Protocol

import numpy as np

from . import autodiff as ad
from .geometry import BBox2D, BBox3D, CameraModel, box_corners, ego_to_camera, overlap_2d, project_points_2d
from .mesh import Mesh, MeshError, MeshPose
from .renderer import NEAR, RenderOutput

MAX_DILATION_PX = 8

# corner-index pairs forming the 12 box edges
BOX_EDGES = np.array([[0, 1], [2, 3], [4, 5], [6, 7], [0, 2], [1, 3],
                      [4, 6], [5, 7], [0, 4], [1, 5], [2, 6], [3, 7]])


class SegmentationProvider(Protocol):
    def __call__(self, raw: np.ndarray, prompt: BBox2D, key: tuple | None = None) -> np.ndarray: ...


def rectangle_mask(prompt: BBox2D, image_size: tuple[int, int], dilate: float = 0.0) -> np.ndarray:
    """Pixels whose centers lie in the (optionally dilated) prompt box."""
    h, w = image_size
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    cols = (xs >= prompt.x_min - dilate) & (xs <= prompt.x_max + dilate)
    rows = (ys >= prompt.y_min - dilate) & (ys <= prompt.y_max + dilate)
    return rows[:, None] & cols[None, :]


class RectangleSegmentation:
    """Default provider: the filled prompt rectangle."""

    def __call__(self, raw: np.ndarray, prompt: BBox2D, key: tuple | None = None) -> np.ndarray:
        return rectangle_mask(prompt, raw.shape[:2])


class FileMaskSegmentation:
    """Reads externally produced masks: ``<root>/<frame>/<camera>/<object>.png``.

    Nonzero pixels count as object. The result is clipped to the prompt box
    dilated by ``MAX_DILATION_PX`` so a sloppy external mask cannot reach
    arbitrarily far.
    """

    def __init__(self, root: str | os.PathLike, fallback: SegmentationProvider | None = None):
        self.root = os.fspath(root)
        self.fallback = fallback

    def path(self, key: tuple) -> str:
        frame, camera, obj = key
        return os.path.join(self.root, str(frame), str(camera), f"{obj}.png")

    def __call__(self, raw: np.ndarray, prompt: BBox2D, key: tuple | None = None) -> np.ndarray:
        from PIL import Image

        if key is None:
            raise ValueError("file-based segmentation needs a (frame, camera, object) key")
        p = self.path(key)
        if not os.path.exists(p):
            if self.fallback is not None:
                return self.fallback(raw, prompt, key)
            raise FileNotFoundError(f"segmentation mask not found: {p}")
        with Image.open(p) as im:
            m = np.asarray(im.convert("L")) > 0
        if m.shape != raw.shape[:2]:
            raise ValueError(f"{p}: mask shape {m.shape} != image shape {raw.shape[:2]}")
        return m & rectangle_mask(prompt, m.shape, MAX_DILATION_PX)


def mesh_depth(mesh: Mesh, pose: MeshPose, cam: CameraModel) -> float:
    """Smallest camera-frame vertex norm."""
    if mesh.n_vertices == 0:
        raise MeshError("empty mesh has no depth")
    v = ego_to_camera(mesh.vertices.data + np.asarray(pose.center), cam)
    return float(np.sqrt((v * v).sum(axis=1)).min())


def object_depth(box: BBox3D, cam: CameraModel) -> float:
    """Smallest camera-frame corner norm."""
    c = ego_to_camera(box_corners(box), cam)
    return float(np.sqrt((c * c).sum(axis=1)).min())


def box_2d_clipped(box: BBox3D, cam: CameraModel) -> BBox2D | None:
    """Image-space hull of a box after clipping its edges at the near plane."""
    c = ego_to_camera(box_corners(box), cam)
    a, b = c[BOX_EDGES[:, 0]], c[BOX_EDGES[:, 1]]
    pts = [c[c[:, 2] > NEAR]]
    cross = (a[:, 2] > NEAR) != (b[:, 2] > NEAR)
    if np.any(cross):
        t = (NEAR - a[cross, 2]) / (b[cross, 2] - a[cross, 2])
        pts.append(a[cross] + t[:, None] * (b[cross] - a[cross]))
    pts = np.concatenate(pts)
    if len(pts) == 0:
        return None
    # project_points_2d expects ego points; map back
    return project_points_2d((pts - cam.T) @ cam.R, cam)


def mesh_box_2d(mesh: Mesh, pose: MeshPose, cam: CameraModel) -> BBox2D | None:
    v = mesh.vertices.data + np.asarray(pose.center)
    vc = ego_to_camera(v, cam)
    v = v[vc[:, 2] > NEAR]
    if len(v) == 0:
        return None
    return project_points_2d(v, cam)


def find_occluders(scene, mesh: Mesh, pose: MeshPose, cam: CameraModel) -> list[int]:
    """Indices of scene objects that overlap the mesh on screen and are nearer."""
    mbox = mesh_box_2d(mesh, pose, cam)
    if mbox is None:
        return []
    d_mesh = mesh_depth(mesh, pose, cam)
    out = []
    for k, obj in enumerate(scene.objects):
        obox = box_2d_clipped(obj.box, cam)
        if overlap_2d(mbox, obox) > 0 and object_depth(obj.box, cam) < d_mesh:
            out.append(k)
    return out


def apply_occlusion(render: RenderOutput, scene, mesh: Mesh, pose: MeshPose, cam: CameraModel,
                    seg: SegmentationProvider | None = None, raw: np.ndarray | None = None,
                    frame_key=None) -> RenderOutput:
    """Multiply the mesh mask by ``1 - M_k`` for every occluder ``k``; masks are constants."""
    seg = seg or RectangleSegmentation()
    occ = find_occluders(scene, mesh, pose, cam)
    if not occ:
        return render
    if raw is None:
        raw = np.zeros((*cam.image_size, 3))
    keep = np.ones(cam.image_size)
    for k in occ:
        m = seg(raw, box_2d_clipped(scene.objects[k].box, cam), key=(frame_key, cam.name, k))
        keep *= 1.0 - np.asarray(m, dtype=float)
    mask = render.mask * ad.Tensor(keep[:, :, None])
    return RenderOutput(render.rgb, mask)


def composite(render: RenderOutput, raw) -> ad.Tensor:
    """``rgb * mask + (1 - mask) * raw``; differentiable in the render, raw is constant."""
    raw_t = raw if isinstance(raw, ad.Tensor) else ad.Tensor(np.asarray(raw, dtype=float))
    if raw_t.shape != render.rgb.shape:
        raise ad.ShapeError(f"composite: raw image {raw_t.shape} vs render {render.rgb.shape}")
    if render.mask.shape != render.rgb.shape[:2] + (1,):
        raise ad.ShapeError(f"composite: mask {render.mask.shape} vs render {render.rgb.shape}")
    return render.rgb * render.mask + (1.0 - render.mask) * raw_t
