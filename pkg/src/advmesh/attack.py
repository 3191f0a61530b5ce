"""Optimize a universal adversarial mesh against the BEV detector.

Each step places the shared mesh next to up to ``meshes_per_frame`` target
vehicles, renders it softly into every camera, carves out nearer annotated
objects, alpha-composites over the raw images and runs the frozen detector.
The objective is

    total = L_cls + alpha * L_loc + beta * L_sim

with L_cls the vehicle heatmap mass over target footprints, L_loc the negated
mean L1 box error of the regression read at those footprints, and L_sim the
cosine similarity between adversarial and clean BEV features.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .detector import BevGrid, DetectorParams, extract_bev, heads
from .geometry import BBox3D, box_corners
from .images import save_png, tile
from .mesh import DEFAULT_D_MAX, Mesh, MeshPose, PlacementError, check_direction, local_direction, \
    max_extent, offset_center, outward_direction, save_obj
from .occlusion import SegmentationProvider, apply_occlusion, composite, mesh_depth
from .optim import Adam
from .renderer import RenderOutput, rasterize_soft

log = logging.getLogger(__name__)

AdamState = Adam  # moments, step counter and hyperparameters live on the optimizer
LOSS_COLUMNS = ("epoch", "loss_cls", "loss_loc", "loss_sim", "total")


class AttackError(RuntimeError):
    pass


class NumericError(AttackError):
    """Non-finite loss; ``diagnostics`` holds the loss components and gradient norms."""

    def __init__(self, msg: str, diagnostics: dict):
        super().__init__(msg)
        self.diagnostics = diagnostics


@dataclass
class AttackConfig:
    lr: float = 0.02
    displacement_cap: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    epochs: int = 10
    meshes_per_frame: int = 4
    distance: float = 0.1
    corner: int = 0
    direction: tuple[float, float, float] | None = None  # box frame; None -> outward along the width
    occlusion: bool = True
    cull_backfaces: bool = True
    gamma: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.meshes_per_frame < 1:
            raise ValueError("meshes_per_frame must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not (0.0 <= self.distance <= DEFAULT_D_MAX):
            raise ValueError(f"distance must lie in [0, {DEFAULT_D_MAX}]")
        if not (0 <= self.corner < 8):
            raise ValueError("corner index must lie in [0, 8)")
        if self.displacement_cap <= 0:
            raise ValueError("displacement cap must be positive")
        if self.direction is not None:
            self.direction = tuple(float(x) for x in self.direction)

    def local_direction(self) -> np.ndarray:
        if self.direction is None:
            return outward_direction(self.corner, "width")
        v = np.asarray(self.direction, dtype=float)
        return v / np.linalg.norm(v)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# placement
# ---------------------------------------------------------------------------

def select_targets(scene, k: int) -> list[BBox3D]:
    """The ``k`` vehicles nearest to the ego origin."""
    vehicles = scene.boxes_of("vehicle")
    return sorted(vehicles, key=lambda b: math.hypot(b.center[0], b.center[1]))[:k]


def pose_near(target: BBox3D, meshes: list[Mesh], corner: int, local_dir, d: float) -> MeshPose:
    """Pose off ``target``'s corner that clears the box for every mesh in ``meshes``.

    Using the largest extent among several meshes gives them one shared pose,
    so initial and optimized meshes are compared at identical placements.
    """
    n = local_direction(target, local_dir)
    check_direction(target, corner, n)
    ext = max(max_extent(m, -n) for m in meshes)
    return MeshPose(offset_center(box_corners(target)[corner], ext, n, d))


def frame_poses(scene, meshes: list[Mesh], cfg: AttackConfig) -> tuple[list[BBox3D], list[MeshPose]]:
    targets = select_targets(scene, cfg.meshes_per_frame)
    poses = [pose_near(t, meshes, cfg.corner, cfg.local_direction(), cfg.distance) for t in targets]
    return targets, poses


# ---------------------------------------------------------------------------
# rendering into the scene
# ---------------------------------------------------------------------------

def adversarial_images(scene, mesh: Mesh, poses: list[MeshPose], cfg: AttackConfig,
                       seg: SegmentationProvider | None = None) -> list[ad.Tensor]:
    """Per-camera composited images; instances blended far to near by nearest-vertex depth."""
    raws = scene.raw_images()
    out = []
    for cam, raw in zip(scene.cameras, raws):
        layers: list[tuple[float, RenderOutput]] = []
        for pose in poses:
            r = rasterize_soft(mesh, pose, cam, gamma=cfg.gamma, cull_backfaces=cfg.cull_backfaces)
            if r.coverage <= 0.0:
                continue
            if cfg.occlusion:
                r = apply_occlusion(r, scene, mesh, pose, cam, seg, raw, frame_key=scene.id)
            layers.append((mesh_depth(mesh, pose, cam), r))
        img = ad.Tensor(raw)
        for _, r in sorted(layers, key=lambda x: -x[0]):
            img = composite(r, img)
        out.append(img)
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def target_region(boxes: list[BBox3D], grid: BevGrid) -> np.ndarray:
    region = np.zeros((grid.nx, grid.ny), dtype=bool)
    for b in boxes:
        region |= grid.footprint_mask(b)
    return region


def loss_cls(heatmap, targets: list[BBox3D], grid: BevGrid) -> ad.Tensor:
    """Vehicle heatmap mass over the union of target footprints. ``heatmap`` is (X, Y)."""
    if not targets:
        log.warning("loss_cls: no targets, loss is 0")
        return ad.Tensor(0.0)
    heat = ad.as_tensor(heatmap)
    return ad.where(target_region(targets, grid), heat, 0.0).sum()


def box_params(box: BBox3D) -> np.ndarray:
    return np.array([*box.center, *box.size, box.yaw])


def loss_loc(pred, gt_box: BBox3D) -> ad.Tensor:
    """``-mean_k |pred_k - gt|_1`` over (x, y, z, l, w, h, yaw) rows; 0 when there are no rows.

    The yaw difference is wrapped to (-pi/2, pi/2] since boxes are symmetric
    under a half turn.
    """
    p = ad.as_tensor(pred)
    if p.ndim == 1:
        p = p.reshape(1, -1)
    if p.shape[0] == 0:
        return ad.Tensor(0.0)
    if p.shape[1] != 7:
        raise ad.ShapeError(f"loss_loc expects (n, 7) box parameters, got {p.shape}")
    g = box_params(gt_box)
    diff = p - g[None, :]
    raw_yaw = diff.data[:, 6]
    wrap = np.round(raw_yaw / math.pi) * math.pi  # constant shift, gradient unaffected
    yaw = diff[:, 6] - wrap
    l1 = ad.abs(diff[:, :6]).sum(axis=1) + ad.abs(yaw)
    return -l1.mean()


def region_predictions(regression: ad.Tensor, box: BBox3D, grid: BevGrid) -> ad.Tensor:
    """Decode regression at every cell of ``box``'s footprint into (n, 7) box parameters."""
    ii, jj = np.nonzero(grid.footprint_mask(box))
    if len(ii) == 0:
        return ad.Tensor(np.zeros((0, 7)))
    flat = regression.reshape(regression.shape[0], -1)
    cols = ii * grid.ny + jj
    r = flat[:, cols]  # (8, n)
    cx = grid.x_range[0] + (ii + 0.5) * grid.cell
    cy = grid.y_range[0] + (jj + 0.5) * grid.cell
    sizes = ad.exp(ad.clamp(r[3:6], -5.0, 5.0))
    yaw = ad.atan2(r[6], r[7]) * 0.5
    rows = ad.concat([ad.expand_dims(r[0] + cx, 0), ad.expand_dims(r[1] + cy, 0), r[2:3], sizes,
                      ad.expand_dims(yaw, 0)], axis=0)
    return rows.T


def loss_sim(bev_adv, bev_raw) -> ad.Tensor:
    """Cosine similarity of the flattened maps; ``bev_raw`` is treated as a constant."""
    a = ad.as_tensor(bev_adv)
    b = bev_raw.data if isinstance(bev_raw, ad.Tensor) else np.asarray(bev_raw, dtype=float)
    if a.shape != b.shape:
        raise ad.ShapeError(f"loss_sim: {a.shape} vs {b.shape}")
    nb = float(np.sqrt((b * b).sum()))
    na = float(np.sqrt((a.data * a.data).sum()))
    if na == 0.0 or nb == 0.0:
        log.warning("loss_sim: zero-norm BEV features, loss is 0")
        return ad.Tensor(0.0)
    return ad.cosine_similarity(a.reshape(-1), ad.Tensor(b.reshape(-1)))


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

@dataclass
class StepLosses:
    loss_cls: float
    loss_loc: float
    loss_sim: float
    total: float
    coverage: float = 0.0

    def as_row(self) -> list[float]:
        return [self.loss_cls, self.loss_loc, self.loss_sim, self.total]


class AttackState:
    """Frozen detector, cached clean BEV maps and the optimizer over one shared mesh."""

    def __init__(self, mesh: Mesh, detector: DetectorParams, cfg: AttackConfig,
                 seg: SegmentationProvider | None = None):
        self.mesh = mesh
        self.detector = detector.copy().freeze()
        self.cfg = cfg
        self.seg = seg
        self.opt = Adam(mesh.parameters(), lr=cfg.lr)
        self._raw_bev: dict[str, np.ndarray] = {}

    def raw_bev(self, scene) -> np.ndarray:
        if scene.id not in self._raw_bev:
            with ad.no_grad():
                self._raw_bev[scene.id] = extract_bev(scene.raw_images(), scene.cameras, self.detector).data
        return self._raw_bev[scene.id]

    def objective(self, scene, poses: list[MeshPose] | None = None) -> tuple[ad.Tensor, StepLosses]:
        """Weighted loss on one scene. Explicit ``poses`` pin the placement, which otherwise follows the
        mesh's current extent; the targets are still the nearest vehicles."""
        cfg, grid = self.cfg, self.detector.config.grid
        if poses is None:
            targets, poses = frame_poses(scene, [self.mesh], cfg)
        else:
            targets = select_targets(scene, cfg.meshes_per_frame)[:len(poses)]
        imgs = adversarial_images(scene, self.mesh, poses, cfg, self.seg)
        bev = extract_bev(imgs, scene.cameras, self.detector)
        heat, reg = heads(bev, self.detector)
        vehicle = self.detector.config.categories.index("vehicle")
        l_cls = loss_cls(heat[vehicle], targets, grid)
        locs = [loss_loc(region_predictions(reg, t, grid), t) for t in targets]
        l_loc = ad.stack(locs).mean() if locs else ad.Tensor(0.0)
        l_sim = loss_sim(bev, self.raw_bev(scene))
        total = l_cls + cfg.alpha * l_loc + cfg.beta * l_sim
        cover = float(sum(float(np.abs(i.data - r).sum() > 0) for i, r in zip(imgs, scene.raw_images())))
        return total, StepLosses(l_cls.item(), l_loc.item(), l_sim.item(), total.item(), cover)

    def step(self, scene) -> StepLosses:
        self.mesh.zero_grad()
        total, losses = self.objective(scene)
        if not math.isfinite(losses.total):
            diag = {**asdict(losses), **grad_norms(self.mesh)}
            raise NumericError(f"non-finite attack loss on scene {scene.id}: {diag}", diag)
        ad.backward(total)
        self.opt.step()
        self.mesh.clamp_displacement(self.cfg.displacement_cap)
        return losses


def grad_norms(mesh: Mesh) -> dict[str, float]:
    def n(t):
        return float(np.linalg.norm(t.grad)) if t.grad is not None else 0.0
    return {"grad_vertices": n(mesh.vertices), "grad_texture": n(mesh.texture)}


def attack_step(scene, mesh: Mesh, detector: DetectorParams, cfg: AttackConfig,
                state: AttackState | None = None) -> StepLosses:
    """One full forward/backward/update pass on a single scene."""
    state = state or AttackState(mesh, detector, cfg)
    if state.mesh is not mesh:
        raise AttackError("state was built for a different mesh")
    return state.step(scene)


@dataclass
class AttackResult:
    mesh: Mesh
    epoch_losses: list[StepLosses]
    step_losses: list[StepLosses] = field(default_factory=list)


def _mean_losses(items: list[StepLosses]) -> StepLosses:
    a = np.array([s.as_row() for s in items])
    m = a.mean(axis=0)
    return StepLosses(*(float(x) for x in m))


def run_attack(scenes, detector: DetectorParams, cfg: AttackConfig, mesh: Mesh,
               run_dir: str | os.PathLike | None = None, seg: SegmentationProvider | None = None,
               progress=None) -> AttackResult:
    """Train one shared mesh over all scenes for ``cfg.epochs`` epochs (scene order reshuffled per epoch)."""
    if not scenes:
        raise AttackError("no training scenes")
    state = AttackState(mesh, detector, cfg, seg)
    rng = np.random.default_rng(cfg.seed)
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "config.json"), "w") as fh:
            json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
    epochs, steps = [], []
    for epoch in range(1, cfg.epochs + 1):
        items = []
        for idx in rng.permutation(len(scenes)):
            try:
                s = state.step(scenes[int(idx)])
            except NumericError as exc:
                if run_dir is not None:
                    with open(os.path.join(run_dir, "diagnostics.json"), "w") as fh:
                        json.dump(exc.diagnostics, fh, indent=1, sort_keys=True)
                raise
            items.append(s)
        steps += items
        epochs.append(_mean_losses(items))
        log.info("epoch %d: %s", epoch, epochs[-1])
        if run_dir is not None:
            write_loss_csv(epochs, os.path.join(run_dir, "losses.csv"))
            save_obj(mesh, os.path.join(run_dir, f"mesh_epoch{epoch:03d}.obj"))
        if progress:
            progress(epoch, epochs[-1])
    if run_dir is not None:
        save_samples(scenes[0], mesh, cfg, run_dir, seg)
    return AttackResult(mesh, epochs, steps)


def write_loss_csv(epochs: list[StepLosses], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for k, e in enumerate(epochs, start=1):
            w.writerow([k, *(repr(v) for v in e.as_row())])


def save_samples(scene, mesh: Mesh, cfg: AttackConfig, run_dir, seg=None) -> str:
    try:
        _, poses = frame_poses(scene, [mesh], cfg)
    except PlacementError:
        poses = []
    with ad.no_grad():
        imgs = adversarial_images(scene, mesh, poses, cfg, seg)
    path = os.path.join(run_dir, f"sample_{scene.id}.png")
    save_png(tile([i.data for i in imgs]), path)
    return path
