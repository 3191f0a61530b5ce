"""Boxes, pinhole cameras and the transforms between ego, camera and pixel frames.

Frames:
  * ego: x forward, y left, z up, origin on the ground below the rig.
  * camera: x right, y down, z along the optical axis.  ``p_cam = R @ p_ego + T``.
  * pixel: column ``u``, row ``v``; pixel ``(r, c)`` covers ``[c, c+1) x [r, r+1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Polygon

from . import autodiff as ad

NEAR_PLANE = 1e-6


def normalize_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    t = math.fmod(theta + math.pi, 2.0 * math.pi)
    if t <= 0.0:
        t += 2.0 * math.pi
    return t - math.pi


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class BBox3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0
    category: str = "vehicle"

    def __post_init__(self):
        self.center = tuple(float(c) for c in self.center)
        self.size = tuple(float(s) for s in self.size)
        if len(self.center) != 3 or len(self.size) != 3:
            raise ValueError("BBox3D needs a 3-vector center and size")
        if min(self.size) <= 0:
            raise ValueError(f"BBox3D sizes must be positive, got {self.size}")
        self.yaw = normalize_angle(float(self.yaw))

    @classmethod
    def from_params(cls, params, category: str = "vehicle") -> "BBox3D":
        x, y, z, l, w, h, theta = (float(p) for p in params)
        return cls((x, y, z), (l, w, h), theta, category)

    @property
    def params(self) -> np.ndarray:
        """(x, y, z, l, w, h, theta)."""
        return np.array([*self.center, *self.size, self.yaw])

    def to_dict(self) -> dict:
        return {"center": list(self.center), "size": list(self.size), "yaw": self.yaw,
                "category": self.category}

    @classmethod
    def from_dict(cls, d: dict) -> "BBox3D":
        return cls(d["center"], d["size"], d.get("yaw", 0.0), d.get("category", "vehicle"))


@dataclass
class BBox2D:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"invalid BBox2D {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass
class CameraModel:
    K: np.ndarray
    R: np.ndarray
    T: np.ndarray
    image_size: tuple[int, int]  # (H, W)
    name: str = ""
    _key: tuple = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=float).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        self.T = np.asarray(self.T, dtype=float).reshape(3)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(self.R) - 1) > 1e-9:
            raise ValueError("camera rotation must be orthonormal with determinant +1")
        h, w = self.image_size
        if self.fx <= 0 or self.fy <= 0 or not (0 < self.cx < w) or not (0 < self.cy < h):
            raise ValueError(f"invalid intrinsics {self.K.tolist()} for image size {self.image_size}")

    fx = property(lambda self: float(self.K[0, 0]))
    fy = property(lambda self: float(self.K[1, 1]))
    cx = property(lambda self: float(self.K[0, 2]))
    cy = property(lambda self: float(self.K[1, 2]))

    @property
    def center_ego(self) -> np.ndarray:
        """Camera center in the ego frame."""
        return -self.R.T @ self.T

    @property
    def key(self) -> tuple:
        """Hashable identity used to cache geometry derived from this camera."""
        if self._key is None:
            self._key = tuple(np.round(np.concatenate([self.K.ravel(), self.R.ravel(), self.T]), 12)) \
                + self.image_size
        return self._key

    def to_dict(self) -> dict:
        return {"K": self.K.tolist(), "R": self.R.tolist(), "T": self.T.tolist(),
                "size": list(self.image_size), "name": self.name}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["K"], d["R"], d["T"], tuple(d["size"]), d.get("name", ""))


# ---------------------------------------------------------------------------
# boxes
# ---------------------------------------------------------------------------

# Corner k flips the signs of corner 0 = (-l/2, +w/2, -h/2) (the rear-right-bottom
# corner b_1): bit 0 flips the length sign, bit 1 the width sign, bit 2 the height sign.
CORNER_SIGNS = np.array([[-1.0 if not (k & 1) else 1.0,
                          1.0 if not (k & 2) else -1.0,
                          -1.0 if not (k & 4) else 1.0] for k in range(8)])
REAR_RIGHT_BOTTOM = 0


def box_corners(box: BBox3D) -> np.ndarray:
    """The 8 ego-frame corners, shape (8, 3), ordered by :data:`CORNER_SIGNS`."""
    x, y, z = box.center
    l, w, h = box.size
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dl = CORNER_SIGNS[:, 0] * l / 2
    dw = CORNER_SIGNS[:, 1] * w / 2
    dh = CORNER_SIGNS[:, 2] * h / 2
    return np.stack([x + dl * c - dw * s, y + dl * s + dw * c, z + dh], axis=1)


def box_footprint(box: BBox3D) -> np.ndarray:
    """Ground-plane rectangle (4, 2) as a closed ring of corners."""
    return box_corners(box)[[0, 1, 3, 2], :2]


def points_in_box(points: np.ndarray, box: BBox3D, strict: bool = True, tol: float = 1e-9) -> np.ndarray:
    """Boolean mask of points lying inside ``box`` (strictly, by ``tol``, when ``strict``)."""
    p = np.asarray(points, dtype=float) - np.asarray(box.center)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = np.stack([p[:, 0] * c + p[:, 1] * s, -p[:, 0] * s + p[:, 1] * c, p[:, 2]], axis=1)
    half = np.asarray(box.size) / 2
    if strict:
        return np.all(np.abs(local) < half - tol, axis=1)
    return np.all(np.abs(local) <= half + tol, axis=1)


def iou_bev(a: BBox3D, b: BBox3D) -> float:
    """3-D IoU of yaw-rotated boxes: rotated-rectangle overlap times z-interval overlap."""
    pa, pb = Polygon(box_footprint(a)), Polygon(box_footprint(b))
    area = pa.intersection(pb).area
    if area <= 0.0:
        return 0.0
    za = (a.center[2] - a.size[2] / 2, a.center[2] + a.size[2] / 2)
    zb = (b.center[2] - b.size[2] / 2, b.center[2] + b.size[2] / 2)
    dz = min(za[1], zb[1]) - max(za[0], zb[0])
    if dz <= 0.0:
        return 0.0
    inter = area * dz
    va = a.size[0] * a.size[1] * a.size[2]
    vb = b.size[0] * b.size[1] * b.size[2]
    return float(min(1.0, inter / (va + vb - inter)))


def footprint_overlap(a: BBox3D, b: BBox3D) -> float:
    """Ground-plane intersection area of two boxes."""
    return float(Polygon(box_footprint(a)).intersection(Polygon(box_footprint(b))).area)


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------

def ego_to_camera(p, cam: CameraModel):
    """Rigid map ego -> camera. Accepts (3,) / (n, 3) arrays or Tensors."""
    if isinstance(p, ad.Tensor):
        return p @ ad.Tensor(cam.R.T) + ad.Tensor(cam.T)
    return np.asarray(p, dtype=float) @ cam.R.T + cam.T


def camera_to_ego(p, cam: CameraModel) -> np.ndarray:
    return (np.asarray(p, dtype=float) - cam.T) @ cam.R


def project(p_cam, cam: CameraModel):
    """Pinhole projection of camera-frame points.

    Returns ``(pixels, depth, in_front)``; pixels is (..., 2). ``in_front`` flags
    points with ``z > 0``. Points behind the camera are still divided through
    and must be culled by the caller. Differentiable when ``p_cam`` is a Tensor.
    """
    if isinstance(p_cam, ad.Tensor):
        x, y, z = p_cam[..., 0], p_cam[..., 1], p_cam[..., 2]
        u = x / z * cam.fx + cam.cx
        v = y / z * cam.fy + cam.cy
        pix = ad.stack([u, v], axis=-1)
        return pix, z, z.data > NEAR_PLANE
    p = np.asarray(p_cam, dtype=float)
    z = p[..., 2]
    in_front = z > NEAR_PLANE
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * p[..., 0] / z + cam.cx
        v = cam.fy * p[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1), z, in_front


def project_points_2d(points_ego: np.ndarray, cam: CameraModel) -> BBox2D | None:
    """Axis-aligned hull of the in-front projections, clipped to the image."""
    pix, _, front = project(ego_to_camera(points_ego, cam), cam)
    if not np.any(front):
        return None
    pix = pix[front]
    h, w = cam.image_size
    x0, y0 = np.clip(pix.min(axis=0), 0, [w, h])
    x1, y1 = np.clip(pix.max(axis=0), 0, [w, h])
    return BBox2D(float(x0), float(y0), float(x1), float(y1))


def project_box_2d(box: BBox3D, cam: CameraModel) -> BBox2D | None:
    return project_points_2d(box_corners(box), cam)


def overlap_2d(a: BBox2D | None, b: BBox2D | None) -> float:
    if a is None or b is None:
        return 0.0
    dx = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    dy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    return float(dx * dy) if dx > 0 and dy > 0 else 0.0


def pixel_rays(cam: CameraModel, supersample: int = 1) -> np.ndarray:
    """Ego-frame unit ray directions through pixel (sub-)centers, shape (H*s, W*s, 3)."""
    h, w = cam.image_size
    s = supersample
    u = (np.arange(w * s) + 0.5) / s
    v = (np.arange(h * s) + 0.5) / s
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], axis=-1)
    d = d_cam @ cam.R  # R^T d for row vectors
    return d / np.linalg.norm(d, axis=-1, keepdims=True)
