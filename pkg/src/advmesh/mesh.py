"""Triangle meshes with per-vertex color, primitive shapes, placement and OBJ I/O."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import BBox3D, CORNER_SIGNS, box_corners, points_in_box

DEFAULT_D_MAX = 3.0
GRAY = 0.5


class MeshError(ValueError):
    pass


class PlacementError(ValueError):
    pass


class Mesh:
    """Vertices and texture are differentiable leaves; ``base_vertices`` is frozen at creation."""

    def __init__(self, vertices, faces, texture=None, base_vertices=None):
        v = np.asarray(vertices, dtype=float).reshape(-1, 3)
        f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if len(v) == 0:
            raise MeshError("mesh has no vertices")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError(f"face index out of range [0, {len(v)})")
        if f.size and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise MeshError("degenerate face with repeated vertex index")
        t = np.full_like(v, GRAY) if texture is None else np.asarray(texture, dtype=float).reshape(-1, 3)
        if t.shape != v.shape:
            raise MeshError(f"texture shape {t.shape} does not match vertices {v.shape}")
        self.vertices = ad.Tensor(v.copy(), requires_grad=True)
        self.texture = ad.Tensor(np.clip(t, 0.0, 1.0), requires_grad=True)
        self.faces = f
        self.base_vertices = v.copy() if base_vertices is None else np.asarray(base_vertices, dtype=float).copy()

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def parameters(self) -> dict[str, ad.Tensor]:
        return {"vertices": self.vertices, "texture": self.texture}

    def zero_grad(self) -> None:
        self.vertices.zero_grad()
        self.texture.zero_grad()

    def clone(self) -> "Mesh":
        return Mesh(self.vertices.data, self.faces, self.texture.data, self.base_vertices)

    def clamp_displacement(self, cap: float) -> None:
        """Project vertices into the cap box around ``base_vertices`` and texture into [0, 1]."""
        if cap <= 0:
            raise ValueError("displacement cap must be positive")
        b = self.base_vertices
        self.vertices.data = np.clip(self.vertices.data, b - cap, b + cap)
        self.texture.data = np.clip(self.texture.data, 0.0, 1.0)

    def max_displacement(self) -> float:
        return float(np.max(np.abs(self.vertices.data - self.base_vertices)))

    def max_extent(self, direction) -> float:
        return max_extent(self, direction)

    def __repr__(self) -> str:
        return f"Mesh(n_vertices={self.vertices.shape[0]}, n_faces={self.n_faces})"


@dataclass
class MeshPose:
    """Mesh placement in the ego frame; rotation stays identity."""

    center: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        if not np.array_equal(self.rotation, np.eye(3)):
            raise ValueError("mesh pose rotation must be the identity")

    def apply(self, vertices: ad.Tensor) -> ad.Tensor:
        return vertices + ad.Tensor(self.center)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _grid_face(origin, du, dv, n: int):
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    pts = origin + (i[..., None] / n) * du + (j[..., None] / n) * dv
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return pts.reshape(-1, 3), faces


def make_cube(edge: float = 0.9, subdivisions: int = 10) -> Mesh:
    """Six independently gridded faces (edge vertices duplicated per face), outward winding."""
    h = edge / 2
    e = np.eye(3)
    verts, faces = [], []
    offset = 0
    for axis in range(3):
        for sign in (-1.0, 1.0):
            u, v = e[(axis + 1) % 3], e[(axis + 2) % 3]
            if sign < 0:
                u, v = v, u
            origin = sign * h * e[axis] - h * u - h * v
            p, f = _grid_face(origin, edge * u, edge * v, subdivisions)
            verts.append(p)
            faces.append(f + offset)
            offset += len(p)
    return Mesh(np.concatenate(verts), np.concatenate(faces))


def make_icosphere(radius: float = 0.5, subdivisions: int = 4) -> Mesh:
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, dtype=float) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return Mesh(np.array(v) * radius, np.array(faces))


def make_cylinder(radius: float = 0.3, height: float = 2.0, segments: int = 81, rings: int = 20) -> Mesh:
    """Side grid with a duplicated seam column plus fan caps; axis along z.

    The seam sits at angle -pi/2 so the extent along -y equals the radius exactly.
    """
    ang = -math.pi / 2 + 2.0 * math.pi * np.arange(segments + 1) / segments
    zs = np.linspace(-height / 2, height / 2, rings)
    ring_xy = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    ring_xy[-1] = ring_xy[0]
    side = np.array([[x, y, z] for z in zs for x, y in ring_xy])
    cols = segments + 1
    faces = []
    for r in range(rings - 1):
        for s in range(segments):
            a, b = r * cols + s, r * cols + s + 1
            c, d = (r + 1) * cols + s + 1, (r + 1) * cols + s
            faces += [(a, b, c), (a, c, d)]
    bottom, top = len(side), len(side) + 1
    last = (rings - 1) * cols
    for s in range(segments):
        faces.append((bottom, s + 1, s))
        faces.append((top, last + s, last + s + 1))
    verts = np.concatenate([side, [[0.0, 0.0, -height / 2], [0.0, 0.0, height / 2]]])
    return Mesh(verts, np.array(faces))


PRIMITIVES = {
    "cylinder": make_cylinder,
    "cube": make_cube,
    "sphere": make_icosphere,
}


def init_primitive(shape: str) -> Mesh:
    """Primitive at the reference sizes: cylinder r=0.3 h=2.0, cube edge 0.9, sphere r=0.5."""
    try:
        return PRIMITIVES[shape]()
    except KeyError:
        raise ValueError(f"unknown primitive {shape!r}; expected one of {sorted(PRIMITIVES)}") from None


# ---------------------------------------------------------------------------
# extents and placement
# ---------------------------------------------------------------------------

def _unit(direction) -> np.ndarray:
    n = np.asarray(direction, dtype=float).reshape(3)
    if abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise ValueError(f"direction must be a unit vector, got norm {np.linalg.norm(n)}")
    return n


def max_extent(mesh: Mesh, direction) -> float:
    """Largest projection of a vertex (relative to the local origin) onto ``direction``."""
    n = _unit(direction)
    v = mesh.vertices.data
    if len(v) == 0:
        raise MeshError("mesh has no vertices")
    return float(np.max(v @ n))


def offset_center(corner, extent: float, direction, d: float) -> np.ndarray:
    """``corner + (extent + d) * direction``."""
    return np.asarray(corner, dtype=float) + (extent + d) * np.asarray(direction, dtype=float)


def local_direction(box: BBox3D, local) -> np.ndarray:
    """Rotate a direction given in the box frame (x along length) into the ego frame."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx, ly, lz = np.asarray(local, dtype=float)
    v = np.array([c * lx - s * ly, s * lx + c * ly, lz])
    return v / np.linalg.norm(v)


def outward_direction(corner_index: int, axis: str = "width") -> np.ndarray:
    """Box-frame unit vector leaving corner ``corner_index`` along one box axis."""
    k = {"length": 0, "width": 1, "height": 2}[axis]
    v = np.zeros(3)
    v[k] = CORNER_SIGNS[corner_index, k]
    return v


def check_direction(box: BBox3D, corner_index: int, direction) -> None:
    """Reject directions that enter the box from the chosen corner.

    From a corner with box-frame sign vector s, every box point q satisfies
    (q - corner) . n <= 0 iff each box-frame component of n has the sign of s
    (or is zero). Only then does the half-space argument guarantee separation.
    """
    n = _unit(direction)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    loc = np.array([c * n[0] + s * n[1], -s * n[0] + c * n[1], n[2]])
    if np.any(loc * CORNER_SIGNS[corner_index] < -1e-9):
        raise PlacementError(f"direction {n.tolist()} points into the target box from corner {corner_index}")


def place(mesh: Mesh, target: BBox3D, corner_index: int, direction, d: float,
          d_max: float = DEFAULT_D_MAX) -> MeshPose:
    """Put the mesh ``d`` beyond ``target``'s corner along ``direction`` without touching it.

    The extent is measured along ``-direction`` so the mesh's nearest vertices sit
    exactly ``d`` from the corner plane.
    """
    if not (0 <= corner_index < 8):
        raise PlacementError(f"corner index {corner_index} out of range")
    if not (0.0 <= d <= d_max):
        raise PlacementError(f"distance {d} outside [0, {d_max}]")
    n = _unit(direction)
    check_direction(target, corner_index, n)
    corner = box_corners(target)[corner_index]
    return MeshPose(offset_center(corner, max_extent(mesh, -n), n, d))


def intersects_box(mesh: Mesh, pose: MeshPose, box: BBox3D) -> bool:
    return bool(np.any(points_in_box(mesh.vertices.data + pose.center, box, strict=True)))


# ---------------------------------------------------------------------------
# OBJ I/O
# ---------------------------------------------------------------------------

def save_obj(mesh: Mesh, path: str | os.PathLike) -> None:
    lines = ["# advmesh triangle mesh with per-vertex color"]
    for (x, y, z), (r, g, b) in zip(mesh.vertices.data, mesh.texture.data):
        lines.append(f"v {x:.17g} {y:.17g} {z:.17g} {r:.17g} {g:.17g} {b:.17g}")
    for a, b, c in mesh.faces + 1:
        lines.append(f"f {a} {b} {c}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_obj(path: str | os.PathLike) -> Mesh:
    verts, colors, faces = [], [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tag, *rest = line.split()
            try:
                if tag == "v":
                    vals = [float(t) for t in rest]
                    if len(vals) not in (3, 4, 6, 7):
                        raise ValueError(f"expected 3 or 6 components, got {len(vals)}")
                    verts.append(vals[:3])
                    colors.append(vals[3:6] if len(vals) >= 6 else [GRAY] * 3)
                elif tag == "f":
                    if len(rest) != 3:
                        raise MeshError(f"{path}:{lineno}: non-triangular face with {len(rest)} vertices")
                    idx = [int(t.split("/")[0]) for t in rest]
                    faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
            except MeshError:
                raise
            except ValueError as exc:
                raise MeshError(f"{path}:{lineno}: malformed {tag!r} record: {exc}") from None
    if not verts:
        raise MeshError(f"{path}: no vertices")
    return Mesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3), np.array(colors))
