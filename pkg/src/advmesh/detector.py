"""A small lift-splat style BEV detector used as the attack victim.

Per-view conv encoder -> fixed-height inverse-projection lift onto a BEV grid
(bilinear gathers averaged over cameras; heights kept as separate channel
blocks by default) -> two BEV convs, the second dilated ->
1x1 heads: per-category sigmoid heatmap and 8 regression channels
``(dx, dy, z, log l, log w, log h, sin 2θ, cos 2θ)``.

The yaw is regressed at double angle because a cuboid looks the same after a
half turn; decoding halves ``atan2``.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .geometry import BBox3D, CameraModel, ego_to_camera
from .optim import Adam
from .scene import CATEGORIES, Scene

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
N_REG = 8


class DetectorError(RuntimeError):
    pass


@dataclass(frozen=True)
class BevGrid:
    x_range: tuple[float, float] = (-20.0, 20.0)
    y_range: tuple[float, float] = (-20.0, 20.0)
    resolution: float = 2.0  # cells per meter
    channels: int = 32

    def __post_init__(self):
        for lo, hi in (self.x_range, self.y_range):
            span = (hi - lo) * self.resolution
            if hi <= lo or abs(span - round(span)) > 1e-9:
                raise ValueError(f"range ({lo}, {hi}) is not a whole number of cells at {self.resolution}/m")

    @property
    def nx(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) * self.resolution))

    @property
    def ny(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) * self.resolution))

    @property
    def cell(self) -> float:
        return 1.0 / self.resolution

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Ego x, y of every cell, each shaped (nx, ny)."""
        xs = self.x_range[0] + (np.arange(self.nx) + 0.5) * self.cell
        ys = self.y_range[0] + (np.arange(self.ny) + 0.5) * self.cell
        return np.meshgrid(xs, ys, indexing="ij")

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return (int(math.floor((x - self.x_range[0]) * self.resolution)),
                int(math.floor((y - self.y_range[0]) * self.resolution)))

    def contains(self, i: int, j: int) -> bool:
        return 0 <= i < self.nx and 0 <= j < self.ny

    def footprint_mask(self, box: BBox3D) -> np.ndarray:
        """Cells whose centers lie inside the box's rotated ground rectangle."""
        gx, gy = self.cell_centers()
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        dx, dy = gx - box.center[0], gy - box.center[1]
        lx = dx * c + dy * s
        ly = -dx * s + dy * c
        return (np.abs(lx) <= box.size[0] / 2) & (np.abs(ly) <= box.size[1] / 2)

    def to_dict(self) -> dict:
        return {"x_range": list(self.x_range), "y_range": list(self.y_range),
                "resolution": self.resolution, "channels": self.channels}

    @classmethod
    def from_dict(cls, d: dict) -> "BevGrid":
        return cls(tuple(d["x_range"]), tuple(d["y_range"]), float(d["resolution"]), int(d["channels"]))


@dataclass(frozen=True)
class DetectorConfig:
    grid: BevGrid = field(default_factory=BevGrid)
    heights: tuple[float, ...] = (0.0, 0.5, 1.0, 1.5)
    enc_channels: int = 16
    img_kernel: int = 5
    bev_kernel: int = 3
    bev_dilation: int = 3  # dilation of the second BEV conv; widens the receptive field for free
    lift: str = "concat"  # "concat": one channel block per height; "mean": average over heights
    categories: tuple[str, ...] = CATEGORIES

    def __post_init__(self):
        if self.lift not in ("concat", "mean"):
            raise ValueError(f"lift must be 'concat' or 'mean', got {self.lift!r}")
        if not self.heights:
            raise ValueError("at least one lift height is required")
        if self.enc_channels < 1 or self.img_kernel % 2 == 0 or self.bev_kernel % 2 == 0:
            raise ValueError("channel counts must be positive and kernels odd")
        if self.bev_dilation < 1:
            raise ValueError("bev_dilation must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        d["heights"] = list(self.heights)
        d["categories"] = list(self.categories)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        d["grid"] = BevGrid.from_dict(d["grid"])
        d["heights"] = tuple(d["heights"])
        d["categories"] = tuple(d["categories"])
        return cls(**d)


@dataclass
class Detection:
    box: BBox3D
    score: float
    category: str

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class DetectorParams:
    """Named weight tensors plus the config they were built for."""

    def __init__(self, config: DetectorConfig, tensors: dict[str, ad.Tensor]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: DetectorConfig | None = None, seed: int = 0, zero: bool = False) -> "DetectorParams":
        cfg = config or DetectorConfig()
        rng = np.random.default_rng(seed)
        c, e = cfg.grid.channels, cfg.enc_channels
        ki, kb = cfg.img_kernel, cfg.bev_kernel
        shapes = {
            "enc1_w": (e, 3, ki, ki), "enc1_b": (e,),
            "enc2_w": (c, e, ki, ki), "enc2_b": (c,),
            "bev1_w": (c, c * (len(cfg.heights) if cfg.lift == "concat" else 1), kb, kb), "bev1_b": (c,),
            "bev2_w": (c, c, kb, kb), "bev2_b": (c,),
            "heat_w": (len(cfg.categories), c, 1, 1), "heat_b": (len(cfg.categories),),
            "reg_w": (N_REG, c, 1, 1), "reg_b": (N_REG,),
        }
        tensors = {}
        for name, shape in shapes.items():
            if zero:
                data = np.zeros(shape)
            elif name.endswith("_b"):
                data = np.full(shape, -2.19) if name == "heat_b" else np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                data = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
                if name in ("heat_w", "reg_w"):
                    data *= 0.1
            tensors[name] = ad.Tensor(data, requires_grad=True)
        return cls(cfg, tensors)

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.tensors[name]

    def freeze(self) -> "DetectorParams":
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None
        return self

    def copy(self) -> "DetectorParams":
        return DetectorParams(self.config, {k: ad.Tensor(v.data.copy(), requires_grad=v.requires_grad)
                                            for k, v in self.tensors.items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())

    def save(self, path: str | os.PathLike, extra: dict | None = None) -> None:
        meta = {"version": CHECKPOINT_VERSION, "config": self.config.to_dict(), "extra": extra or {}}
        arrays = {f"param/{k}": v.data for k, v in self.tensors.items()}
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path: str | os.PathLike, expect_grid: BevGrid | None = None) -> "DetectorParams":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise DetectorError(f"{path}: unsupported checkpoint version {meta.get('version')}")
            cfg = DetectorConfig.from_dict(meta["config"])
            if expect_grid is not None and cfg.grid != expect_grid:
                raise DetectorError(f"{path}: checkpoint grid {cfg.grid} does not match {expect_grid}")
            tensors = {k.split("/", 1)[1]: ad.Tensor(z[k]) for k in z.files if k.startswith("param/")}
        return cls(cfg, tensors)


# ---------------------------------------------------------------------------
# lift
# ---------------------------------------------------------------------------

def _conv_out(n: int, k: int, stride: int = 2) -> int:
    pad = k // 2
    return (n + 2 * pad - k) // stride + 1


def feature_size(image_size: tuple[int, int], kernel: int) -> tuple[int, int]:
    h, w = image_size
    return _conv_out(_conv_out(h, kernel), kernel), _conv_out(_conv_out(w, kernel), kernel)


_LIFT_CACHE: dict[tuple, sp.csr_matrix] = {}


def lift_matrix(cams: list[CameraModel], grid: BevGrid, heights, feat_size: tuple[int, int],
                per_height: bool = False) -> sp.csr_matrix:
    """Sparse operator from stacked view features (V*hf*wf) to BEV cells.

    Bilinear gathers averaged over the valid (camera, height) samples of each
    cell, giving (nx*ny) rows; with ``per_height`` heights are kept apart and
    only cameras are averaged, giving (n_heights*nx*ny) rows.
    """
    key = (tuple(c.key for c in cams), grid, tuple(heights), tuple(feat_size), per_height)
    hit = _LIFT_CACHE.get(key)
    if hit is not None:
        return hit
    hf, wf = feat_size
    gx, gy = grid.cell_centers()
    n_cells = gx.size
    n_rows = n_cells * (len(heights) if per_height else 1)
    rows, cols, vals = [], [], []
    count = np.zeros(n_rows)
    for v, cam in enumerate(cams):
        h, w = cam.image_size
        sy, sx = h / hf, w / wf
        for hi, z in enumerate(heights):
            pts = np.stack([gx.ravel(), gy.ravel(), np.full(n_cells, float(z))], axis=1)
            pc = ego_to_camera(pts, cam)
            front = pc[:, 2] > 1e-3
            zc = np.where(front, pc[:, 2], 1.0)
            u = cam.fx * pc[:, 0] / zc + cam.cx
            vv = cam.fy * pc[:, 1] / zc + cam.cy
            ok = front & (u >= 0) & (u < w) & (vv >= 0) & (vv < h)
            cell = np.nonzero(ok)[0] + (hi * n_cells if per_height else 0)
            fu = u[ok] / sx - 0.5
            fv = vv[ok] / sy - 0.5
            u0, v0 = np.floor(fu), np.floor(fv)
            au, av = fu - u0, fv - v0
            count[cell] += 1
            for du, dv, wt in ((0, 0, (1 - au) * (1 - av)), (1, 0, au * (1 - av)),
                               (0, 1, (1 - au) * av), (1, 1, au * av)):
                cu = np.clip(u0 + du, 0, wf - 1).astype(np.int64)
                cv = np.clip(v0 + dv, 0, hf - 1).astype(np.int64)
                rows.append(cell)
                cols.append(v * hf * wf + cv * wf + cu)
                vals.append(wt)
    rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    vals = np.concatenate(vals) if vals else np.zeros(0)
    vals = vals / np.maximum(count[rows], 1.0)
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n_rows, len(cams) * hf * wf))
    mat.sum_duplicates()
    _LIFT_CACHE[key] = mat
    return mat


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _as_batch(images) -> ad.Tensor:
    """(B, V, 3, H, W) Tensor from a list of (H, W, 3) images/Tensors or a stacked array."""
    if isinstance(images, ad.Tensor):
        t = images
    elif isinstance(images, np.ndarray):
        t = ad.Tensor(images)
    else:
        t = ad.stack([ad.as_tensor(im) for im in images], axis=0)
    if t.ndim == 4:  # (V, H, W, 3)
        t = ad.expand_dims(t, 0)
    if t.ndim != 5:
        raise ad.ShapeError(f"expected (V, H, W, 3) or (B, V, H, W, 3) images, got {t.shape}")
    return t.transpose(0, 1, 4, 2, 3)


def extract_bev(images, cams: list[CameraModel], params: DetectorParams) -> ad.Tensor:
    """BEV features (B, C, nx, ny) — or (C, nx, ny) for a single set of views."""
    cfg = params.config
    x = _as_batch(images)
    b, v, _, h, w = x.shape
    if v != len(cams):
        raise ad.ShapeError(f"{v} views but {len(cams)} cameras")
    for cam in cams:
        if cam.image_size != (h, w):
            raise ad.ShapeError(f"image size {(h, w)} does not match camera {cam.name} {cam.image_size}")
    pi, pb = cfg.img_kernel // 2, cfg.bev_kernel // 2
    x = x.reshape(b * v, 3, h, w) * 2.0  # no shift: zero images stay zero
    f = ad.relu(ad.conv2d(x, params["enc1_w"], params["enc1_b"], stride=2, padding=pi))
    f = ad.relu(ad.conv2d(f, params["enc2_w"], params["enc2_b"], stride=2, padding=pi))
    c, hf, wf = f.shape[1:]
    per_height = cfg.lift == "concat"
    nh = len(cfg.heights) if per_height else 1
    mat = lift_matrix(cams, cfg.grid, cfg.heights, (hf, wf), per_height)
    cols = f.reshape(b, v, c, hf, wf).transpose(1, 3, 4, 0, 2).reshape(v * hf * wf, b * c)
    bev = ad.sparse_matmul(mat, cols).reshape(nh, cfg.grid.nx, cfg.grid.ny, b, c)
    bev = bev.transpose(3, 0, 4, 1, 2).reshape(b, nh * c, cfg.grid.nx, cfg.grid.ny)
    bev = ad.relu(ad.conv2d(bev, params["bev1_w"], params["bev1_b"], padding=pb))
    dil = cfg.bev_dilation
    bev = ad.relu(ad.conv2d(bev, params["bev2_w"], params["bev2_b"], padding=pb * dil, dilation=dil))
    return bev if b > 1 or not _single(images) else bev.reshape(bev.shape[1:])


def _single(images) -> bool:
    if isinstance(images, (ad.Tensor, np.ndarray)):
        return images.ndim == 4
    return True


def heads(bev: ad.Tensor, params: DetectorParams) -> tuple[ad.Tensor, ad.Tensor]:
    """(heatmap (K, nx, ny) in (0, 1), regression (8, nx, ny)); batched input keeps its batch axis."""
    single = bev.ndim == 3
    x = ad.expand_dims(bev, 0) if single else bev
    heat = ad.sigmoid(ad.conv2d(x, params["heat_w"], params["heat_b"]))
    reg = ad.conv2d(x, params["reg_w"], params["reg_b"])
    if single:
        return heat.reshape(heat.shape[1:]), reg.reshape(reg.shape[1:])
    return heat, reg


def forward(images, cams, params):
    bev = extract_bev(images, cams, params)
    heat, reg = heads(bev, params)
    return bev, heat, reg


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def regression_to_box(reg: np.ndarray, i: int, j: int, grid: BevGrid, category: str = "vehicle") -> BBox3D:
    gx, gy = grid.x_range[0] + (i + 0.5) * grid.cell, grid.y_range[0] + (j + 0.5) * grid.cell
    dx, dy, z, ll, lw, lh, s2, c2 = (float(r) for r in reg[:, i, j])
    sizes = np.exp(np.clip([ll, lw, lh], -5.0, 5.0))
    yaw = 0.5 * math.atan2(s2, c2)
    return BBox3D((gx + dx, gy + dy, z), tuple(sizes), yaw, category)


def decode(heatmap, regression, grid: BevGrid, score_threshold: float = 0.3, nms_radius: int = 2,
           categories=CATEGORIES) -> list[Detection]:
    """Local maxima above threshold, greedily suppressed within ``nms_radius`` cells per category."""
    if not (0.0 < score_threshold < 1.0):
        raise ValueError("score threshold must lie in (0, 1)")
    heat = heatmap.data if isinstance(heatmap, ad.Tensor) else np.asarray(heatmap)
    reg = regression.data if isinstance(regression, ad.Tensor) else np.asarray(regression)
    dets: list[Detection] = []
    for k, cat in enumerate(categories):
        hm = heat[k]
        padded = np.pad(hm, 1, constant_values=-np.inf)
        win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3))
        peaks = (hm >= win.max(axis=(2, 3))) & (hm > score_threshold)
        ii, jj = np.nonzero(peaks)
        order = np.argsort(-hm[ii, jj], kind="stable")
        kept: list[tuple[int, int]] = []
        for o in order:
            i, j = int(ii[o]), int(jj[o])
            if any(max(abs(i - a), abs(j - b)) <= nms_radius for a, b in kept):
                continue
            kept.append((i, j))
            dets.append(Detection(regression_to_box(reg, i, j, grid, cat), float(hm[i, j]), cat))
    dets.sort(key=lambda d: -d.score)
    return dets


def detect(images, cams, params, score_threshold: float = 0.3, nms_radius: int = 2) -> list[Detection]:
    with ad.no_grad():
        _, heat, reg = forward(images, cams, params)
    return decode(heat, reg, params.config.grid, score_threshold, nms_radius, params.config.categories)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def gaussian_sigma(box: BBox3D, grid: BevGrid) -> float:
    return max(0.8, 0.25 * min(box.size[0], box.size[1]) * grid.resolution)


def build_targets(boxes: list[BBox3D], grid: BevGrid, categories=CATEGORIES):
    """Gaussian-splatted center heatmaps, regression targets and the positive-cell mask."""
    heat = np.zeros((len(categories), grid.nx, grid.ny))
    reg = np.zeros((N_REG, grid.nx, grid.ny))
    pos = np.zeros((grid.nx, grid.ny), dtype=bool)
    gx, gy = grid.cell_centers()
    for box in boxes:
        if box.category not in categories:
            continue
        i, j = grid.cell_of(box.center[0], box.center[1])
        if not grid.contains(i, j):
            continue
        k = categories.index(box.category)
        sig = gaussian_sigma(box, grid)
        d2 = ((gx - box.center[0]) ** 2 + (gy - box.center[1]) ** 2) * grid.resolution ** 2
        g = np.exp(-d2 / (2 * sig * sig))
        g[i, j] = 1.0
        heat[k] = np.maximum(heat[k], g)
        cx, cy = grid.x_range[0] + (i + 0.5) * grid.cell, grid.y_range[0] + (j + 0.5) * grid.cell
        reg[:, i, j] = [box.center[0] - cx, box.center[1] - cy, box.center[2],
                        *np.log(box.size), math.sin(2 * box.yaw), math.cos(2 * box.yaw)]
        pos[i, j] = True
    return heat, reg, pos


def focal_loss(pred: ad.Tensor, target: np.ndarray, alpha: float = 2.0, beta: float = 4.0) -> ad.Tensor:
    """CenterNet penalty-reduced focal loss, normalized by the number of peaks."""
    p = ad.clamp(pred, 1e-4, 1.0 - 1e-4)
    peak = target >= 1.0
    pos_term = ad.where(peak, (1.0 - p) ** alpha * ad.log(p), 0.0)
    neg_w = (1.0 - target) ** beta
    neg_term = ad.where(peak, 0.0, (p ** alpha) * ad.log(1.0 - p) * neg_w)
    n = max(int(peak.sum()), 1)
    return -(pos_term.sum() + neg_term.sum()) * (1.0 / n)


@dataclass
class TrainResult:
    params: DetectorParams
    epoch_losses: list[float]
    diverged: bool = False


def train_detector(scenes: list[Scene], params: DetectorParams | None = None, epochs: int = 20,
                   lr: float = 2e-3, batch_size: int = 4, seed: int = 0, reg_weight: float = 1.0,
                   progress=None) -> TrainResult:
    """Adam on focal heatmap loss + L1 regression at center cells."""
    if not scenes:
        raise DetectorError("training set is empty")
    params = params or DetectorParams.init(seed=seed)
    cfg = params.config
    cams = scenes[0].cameras
    rng = np.random.default_rng(seed)
    targets = [build_targets(s.boxes, cfg.grid, cfg.categories) for s in scenes]
    opt = Adam(params.tensors, lr=lr)
    losses: list[float] = []
    good = {k: v.data.copy() for k, v in params.tensors.items()}
    for epoch in range(epochs):
        order = rng.permutation(len(scenes))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            imgs = np.stack([np.stack(scenes[i].raw_images()) for i in idx])
            _, heat, reg = forward(imgs, cams, params)
            heat_t = np.stack([targets[i][0] for i in idx])
            reg_t = np.stack([targets[i][1] for i in idx])
            pos = np.stack([targets[i][2] for i in idx])
            loss = focal_loss(heat, heat_t)
            n_pos = max(int(pos.sum()), 1)
            posm = np.broadcast_to(pos[:, None], reg_t.shape)
            l1 = ad.where(posm, ad.abs(reg - reg_t), 0.0).sum() * (1.0 / n_pos)
            loss = loss + reg_weight * l1
            value = loss.item()
            if not math.isfinite(value):
                for k, v in good.items():
                    params.tensors[k].data = v
                log.error("non-finite training loss at epoch %d; restored last finite parameters", epoch + 1)
                return TrainResult(params, losses, diverged=True)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            total += value * len(idx)
            count += len(idx)
        if params.is_finite():
            good = {k: v.data.copy() for k, v in params.tensors.items()}
        losses.append(total / count)
        log.info("epoch %d loss %.4f", epoch + 1, losses[-1])
        if progress:
            progress(epoch + 1, losses[-1])
    return TrainResult(params, losses)
