"""Procedural driving scenes: a ring camera rig, proxy cuboid objects and raw images."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Polygon

from .geometry import BBox3D, CameraModel, box_footprint, ego_to_camera
from .renderer import render_scene_hard, scene_triangles, zbuffer

CATEGORIES = ("vehicle", "pedestrian", "barrier")
BASE_COLORS = {
    "vehicle": (0.20, 0.30, 0.75),
    "pedestrian": (0.90, 0.55, 0.15),
    "barrier": (0.85, 0.20, 0.20),
}
COLOR_JITTER = 0.08
EGO_FOOTPRINT = BBox3D((0.0, 0.0, 0.8), (4.6, 1.9, 1.6))
MAX_TRIES = 10_000
MIN_VISIBLE_PX = 20


class SceneError(RuntimeError):
    pass


@dataclass
class SceneObject:
    box: BBox3D
    color: tuple[float, float, float]

    @property
    def category(self) -> str:
        return self.box.category

    def to_dict(self) -> dict:
        d = self.box.to_dict()
        d["color"] = list(self.color)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneObject":
        return cls(BBox3D.from_dict(d), tuple(float(c) for c in d["color"]))


@dataclass
class Scene:
    id: str
    cameras: list[CameraModel]
    objects: list[SceneObject]
    seed: int | None = None
    _raw: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def boxes(self) -> list[BBox3D]:
        return [o.box for o in self.objects]

    def boxes_of(self, category: str) -> list[BBox3D]:
        return [o.box for o in self.objects if o.category == category]

    @property
    def image_size(self) -> tuple[int, int]:
        return self.cameras[0].image_size

    def raw_images(self, supersample: int = 1) -> list[np.ndarray]:
        return render_keyframe(self, supersample)

    def to_dict(self) -> dict:
        return {"id": self.id, "seed": self.seed,
                "cameras": [c.to_dict() for c in self.cameras],
                "objects": [o.to_dict() for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(str(d["id"]), [CameraModel.from_dict(c) for c in d["cameras"]],
                   [SceneObject.from_dict(o) for o in d["objects"]], d.get("seed"))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Scene":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def make_camera_rig(n: int = 6, height: float = 1.6, fov_deg: float = 70.0,
                    image_size: tuple[int, int] = (256, 704)) -> list[CameraModel]:
    """``n`` level cameras at the ego origin, yawed ``k * 360 / n`` degrees."""
    if n < 1:
        raise ValueError("camera rig needs at least one camera")
    if not (10.0 < fov_deg < 120.0):
        raise ValueError(f"horizontal fov {fov_deg} outside (10, 120) degrees")
    h, w = image_size
    f = (w / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    K = np.array([[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]])
    center = np.array([0.0, 0.0, height])
    cams = []
    for k in range(n):
        yaw = 2.0 * math.pi * k / n
        c, s = math.cos(yaw), math.sin(yaw)
        R = np.array([[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])
        cams.append(CameraModel(K, R, -R @ center, image_size, name=f"cam{k}"))
    return cams


def camera_yaw(cam: CameraModel) -> float:
    fwd = cam.R[2]
    return math.atan2(fwd[1], fwd[0])


def in_frustum(point_ego, cam: CameraModel) -> bool:
    p = ego_to_camera(np.asarray(point_ego, dtype=float), cam)
    if p[2] <= 0:
        return False
    u = cam.fx * p[0] / p[2] + cam.cx
    v = cam.fy * p[1] / p[2] + cam.cy
    h, w = cam.image_size
    return bool(0 <= u < w and 0 <= v < h)


def _jitter_color(rng: np.random.Generator, category: str) -> tuple[float, float, float]:
    base = np.asarray(BASE_COLORS[category])
    c = np.clip(base + rng.uniform(-COLOR_JITTER, COLOR_JITTER, 3), 0.0, 1.0)
    return tuple(float(x) for x in c)


def _sample_box(rng, category: str, r_range) -> BBox3D:
    if category == "vehicle":
        size = (4.0 + rng.uniform(-0.5, 0.5), 2.0 + rng.uniform(-0.2, 0.2), 1.5 + rng.uniform(-0.1, 0.1))
    elif category == "pedestrian":
        size = (0.6, 0.6, 1.7)
    else:
        size = (2.0, 0.3, 1.0)
    r = rng.uniform(*r_range)
    bearing = rng.uniform(-math.pi, math.pi)
    yaw = rng.uniform(-math.pi, math.pi)
    return BBox3D((r * math.cos(bearing), r * math.sin(bearing), size[2] / 2), size, yaw, category)


def _fits(box: BBox3D, placed: list[Polygon], x_range, y_range, margin: float) -> bool:
    fp = box_footprint(box)
    if fp[:, 0].min() < x_range[0] + margin or fp[:, 0].max() > x_range[1] - margin:
        return False
    if fp[:, 1].min() < y_range[0] + margin or fp[:, 1].max() > y_range[1] - margin:
        return False
    poly = Polygon(fp)
    return all(poly.distance(p) > margin for p in placed)


def visible_pixels(scene: Scene, supersample: int = 1) -> np.ndarray:
    """Per-object count of pixels where the object is the nearest surface, max over cameras."""
    tris, cols, ids = scene_triangles(scene)
    best = np.zeros(len(scene.objects), dtype=np.int64)
    if len(tris) == 0:
        return best
    for cam in scene.cameras:
        tris_cam = ego_to_camera(tris.reshape(-1, 3), cam).reshape(-1, 3, 3)
        _, _, idbuf = zbuffer(tris_cam, cols, ids, cam, supersample)
        counts = np.bincount(idbuf[idbuf >= 0], minlength=len(scene.objects))
        best = np.maximum(best, counts)
    return best


def generate_scene(seed: int, n_vehicles: int = 3, n_other: int = 2, *,
                   cameras: list[CameraModel] | None = None,
                   x_range=(-20.0, 20.0), y_range=(-20.0, 20.0),
                   vehicle_range=(4.0, 18.0), other_range=(3.0, 18.0),
                   margin: float = 0.5, scene_id: str | None = None) -> Scene:
    """Rejection-sample non-overlapping objects; every vehicle visible in some camera."""
    if n_vehicles < 0 or n_other < 0:
        raise ValueError("object counts must be non-negative")
    rng = np.random.default_rng(seed)
    cams = cameras if cameras is not None else make_camera_rig()
    cats = ["vehicle"] * n_vehicles + [("pedestrian", "barrier")[int(rng.integers(2))] for _ in range(n_other)]
    tries = 0
    while True:
        placed = [Polygon(box_footprint(EGO_FOOTPRINT))]
        objects: list[SceneObject] = []
        for cat in cats:
            while True:
                tries += 1
                if tries > MAX_TRIES:
                    raise SceneError(f"could not place {len(cats)} objects after {MAX_TRIES} tries")
                box = _sample_box(rng, cat, vehicle_range if cat == "vehicle" else other_range)
                if _fits(box, placed, x_range, y_range, margin):
                    break
            placed.append(Polygon(box_footprint(box)))
            objects.append(SceneObject(box, _jitter_color(rng, cat)))
        scene = Scene(scene_id or f"scene_{seed:06d}", cams, objects, seed)
        vis = visible_pixels(scene)
        if all(v >= MIN_VISIBLE_PX for v, o in zip(vis, objects) if o.category == "vehicle"):
            return scene
        tries += 1


def render_keyframe(scene: Scene, supersample: int = 1) -> list[np.ndarray]:
    """Raw per-camera images, rendered once and cached on the scene."""
    if supersample not in scene._raw:
        scene._raw[supersample] = [render_scene_hard(scene, cam, supersample) for cam in scene.cameras]
    return scene._raw[supersample]


def save_scenes(scenes: list[Scene], out_dir: str | os.PathLike) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for s in scenes:
        p = os.path.join(out_dir, f"{s.id}.json")
        s.save(p)
        paths.append(p)
    return paths


def load_scenes(path: str | os.PathLike) -> list[Scene]:
    """Load one scene file or every ``*.json`` in a directory (sorted by name)."""
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.endswith(".json"))
        return [Scene.load(os.path.join(path, n)) for n in names]
    return [Scene.load(path)]
