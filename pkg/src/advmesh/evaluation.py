"""Detection matching, average precision and attack success rate."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from shapely.geometry import Point, Polygon

from . import autodiff as ad
from .attack import adversarial_images, frame_poses
from .detector import detect
from .geometry import BBox3D, box_footprint, iou_bev
from .mesh import DEFAULT_D_MAX, MeshPose
from .scene import EGO_FOOTPRINT

ASR_THRESHOLDS = (0.2, 0.3, 0.5, 0.7)
NON_VEHICLE = "non_vehicle"  # pooled key in the per-category AP dicts
REPORT_COLUMNS = ("config", "threshold", "asr", "ap_vehicle_03", "ap_vehicle_05", "n_init", "n_adv")


def _check_thresh(t: float) -> None:
    if not (0.0 < t < 1.0):
        raise ValueError(f"IoU threshold {t} outside (0, 1)")


def _greedy(dets, gts: list[BBox3D], iou_thresh: float) -> list[bool]:
    """TP flag per detection (in descending-score order); each gt taken at most once."""
    used = np.zeros(len(gts), dtype=bool)
    flags = []
    for det in dets:
        best, best_iou = -1, iou_thresh
        for k, gt in enumerate(gts):
            if used[k]:
                continue
            iou = iou_bev(det.box, gt)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = k, iou
        if best >= 0:
            used[best] = True
        flags.append(best >= 0)
    return flags


def _by_score(dets):
    return sorted(dets, key=lambda d: -d.score)


def match_detections(dets, gts: list[BBox3D], iou_thresh: float) -> int:
    """Number of ground truths hit by some detection, category ignored."""
    _check_thresh(iou_thresh)
    return int(sum(_greedy(_by_score(dets), list(gts), iou_thresh)))


def average_precision(dets_per_frame, gts_per_frame, iou_thresh: float, category=None) -> float:
    """All-points interpolated AP over a set of frames.

    ``dets_per_frame`` / ``gts_per_frame`` are parallel lists. ``category`` may
    be None (everything, category ignored), one category name, or a collection
    of names pooled into one ranking with matching kept within each category.
    Returns nan when there is no ground truth at all.
    """
    _check_thresh(iou_thresh)
    if category is None:
        groups = [None]
    elif isinstance(category, str):
        groups = [category]
    else:
        groups = list(category)
    scored: list[tuple[float, bool]] = []
    n_gt = 0
    for dets, gts in zip(dets_per_frame, gts_per_frame, strict=True):
        for cat in groups:
            d_cat = dets if cat is None else [d for d in dets if d.category == cat]
            g_cat = gts if cat is None else [g for g in gts if g.category == cat]
            n_gt += len(g_cat)
            ranked = _by_score(d_cat)
            scored += [(d.score, tp) for d, tp in zip(ranked, _greedy(ranked, list(g_cat), iou_thresh))]
    if n_gt == 0:
        return float("nan")
    if not scored:
        return 0.0
    scored.sort(key=lambda s: -s[0])
    tp = np.cumsum([s[1] for s in scored], dtype=float)
    fp = np.cumsum([not s[1] for s in scored], dtype=float)
    recall = np.concatenate([[0.0], tp / n_gt, [1.0]])
    precision = np.concatenate([[1.0], tp / (tp + fp), [0.0]])
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.nonzero(recall[1:] != recall[:-1])[0]
    return float(np.sum((recall[steps + 1] - recall[steps]) * precision[steps + 1]))


def asr_from_counts(n_init: int, n_adv: int) -> float:
    """1 - n_adv / n_init; nan (undefined) when nothing was detected to begin with."""
    if n_init < 0 or n_adv < 0:
        raise ValueError("counts must be non-negative")
    if n_init == 0:
        return float("nan")
    return 1.0 - n_adv / n_init


@dataclass
class EvalReport:
    asr: dict[float, float]
    n_init: dict[float, int]
    n_adv: dict[float, int]
    ap_vehicle: dict[float, float]  # adversarial condition, IoU -> AP
    ap_vehicle_init: dict[float, float]
    ap_category: dict[str, float]  # adversarial, IoU 0.3; includes the pooled non-vehicle entry
    ap_category_init: dict[str, float]
    ap_category_clean: dict[str, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for t in self.asr:
            if self.n_init[t] < 0 or self.n_adv[t] < 0:
                raise ValueError("negative count")
            a = self.asr[t]
            if not math.isnan(a) and a > 1.0:
                raise ValueError(f"ASR {a} > 1")

    def rows(self, label: str = "") -> list[dict]:
        return [{"config": label, "threshold": t, "asr": self.asr[t],
                 "ap_vehicle_03": self.ap_vehicle.get(0.3, float("nan")),
                 "ap_vehicle_05": self.ap_vehicle.get(0.5, float("nan")),
                 "n_init": self.n_init[t], "n_adv": self.n_adv[t]} for t in sorted(self.asr)]

    def to_dict(self) -> dict:
        def keyed(d):
            return {str(k): v for k, v in d.items()}
        return {"asr": keyed(self.asr), "n_init": keyed(self.n_init), "n_adv": keyed(self.n_adv),
                "ap_vehicle": keyed(self.ap_vehicle), "ap_vehicle_init": keyed(self.ap_vehicle_init),
                "ap_category": self.ap_category, "ap_category_init": self.ap_category_init,
                "ap_category_clean": self.ap_category_clean, "config": self.config}


def report_from_detections(det_init, det_adv, gts_per_frame, thresholds=ASR_THRESHOLDS,
                           categories=("vehicle", "pedestrian", "barrier"), det_clean=None,
                           config: dict | None = None) -> EvalReport:
    """Build a report from per-frame detection lists under init and adversarial meshes."""
    vehicles = [[g for g in gts if g.category == "vehicle"] for gts in gts_per_frame]
    n_init = {t: sum(match_detections(d, v, t) for d, v in zip(det_init, vehicles)) for t in thresholds}
    n_adv = {t: sum(match_detections(d, v, t) for d, v in zip(det_adv, vehicles)) for t in thresholds}
    asr = {t: asr_from_counts(n_init[t], n_adv[t]) for t in thresholds}
    ap_v = {t: average_precision(det_adv, gts_per_frame, t, "vehicle") for t in (0.3, 0.5)}
    ap_vi = {t: average_precision(det_init, gts_per_frame, t, "vehicle") for t in (0.3, 0.5)}
    others = tuple(c for c in categories if c != "vehicle")

    def per_category(dets):
        out = {c: average_precision(dets, gts_per_frame, 0.3, c) for c in categories}
        if others:
            out[NON_VEHICLE] = average_precision(dets, gts_per_frame, 0.3, others)
        return out

    ap_c, ap_ci = per_category(det_adv), per_category(det_init)
    ap_cc = per_category(det_clean) if det_clean is not None else {}
    return EvalReport(asr, n_init, n_adv, ap_v, ap_vi, ap_c, ap_ci, ap_cc, dict(config or {}))


def write_report_csv(rows: list[dict], path: str | os.PathLike, columns=REPORT_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# running the detector on attacked scenes
# ---------------------------------------------------------------------------

class PlacementOverflow(RuntimeError):
    pass


def detect_with_meshes(scene, detector, mesh, poses, attack_cfg, score_threshold: float = 0.3,
                       nms_radius: int = 2, seg=None):
    """Detections on the scene with ``mesh`` composited at every pose (no poses: clean images)."""
    with ad.no_grad():
        if poses:
            imgs = [t.data for t in adversarial_images(scene, mesh, poses, attack_cfg, seg)]
        else:
            imgs = scene.raw_images()
        return detect(imgs, scene.cameras, detector, score_threshold, nms_radius)


def corner_poses(scene, meshes, attack_cfg):
    return frame_poses(scene, meshes, attack_cfg)[1]


def random_poses(scene, meshes, count: int, rng: np.random.Generator, grid=None,
                 max_tries: int = 10_000) -> list:
    """``count`` ground-level positions uniform over the BEV range, clear of every object and the ego."""
    x_range = grid.x_range if grid is not None else (-20.0, 20.0)
    y_range = grid.y_range if grid is not None else (-20.0, 20.0)
    radius = max(float(np.max(np.hypot(m.vertices.data[:, 0], m.vertices.data[:, 1]))) for m in meshes)
    obstacles = [Polygon(box_footprint(b)) for b in scene.boxes] + [Polygon(box_footprint(EGO_FOOTPRINT))]
    poses, placed = [], []
    tries = 0
    while len(poses) < count:
        tries += 1
        if tries > max_tries:
            raise PlacementOverflow(f"could not place {count} meshes in scene {scene.id}")
        x = rng.uniform(x_range[0] + radius, x_range[1] - radius)
        y = rng.uniform(y_range[0] + radius, y_range[1] - radius)
        disk = Point(x, y).buffer(radius)
        if any(disk.intersects(o) for o in obstacles) or any(disk.intersects(p) for p in placed):
            continue
        placed.append(disk)
        poses.append(MeshPose((x, y, 0.0)))
    return poses


def evaluate(scenes, detector, mesh_init, mesh_adv, attack_cfg, thresholds=ASR_THRESHOLDS,
             score_threshold: float = 0.3, nms_radius: int = 2, placement: str = "corner",
             count: int = 1, seed: int = 0, clean: bool = True, seg=None, config: dict | None = None) -> EvalReport:
    """Detect with the initial and the adversarial mesh at identical poses and summarize.

    ``placement`` is "corner" (the attack's own target-corner policy) or
    "random" (``count`` meshes uniform over the BEV range).
    """
    det_i, det_a, det_c, gts = [], [], [], []
    grid = detector.config.grid
    for k, scene in enumerate(scenes):
        if placement == "corner":
            poses = corner_poses(scene, [mesh_init, mesh_adv], attack_cfg)
        elif placement == "random":
            rng = np.random.default_rng([seed, k, count])
            poses = random_poses(scene, [mesh_init, mesh_adv], count, rng, grid)
        else:
            raise ValueError(f"unknown placement {placement!r}")
        det_i.append(detect_with_meshes(scene, detector, mesh_init, poses, attack_cfg, score_threshold,
                                        nms_radius, seg))
        det_a.append(detect_with_meshes(scene, detector, mesh_adv, poses, attack_cfg, score_threshold,
                                        nms_radius, seg))
        if clean:
            det_c.append(detect_with_meshes(scene, detector, None, [], attack_cfg, score_threshold, nms_radius))
        gts.append(scene.boxes)
    cfg = {"placement": placement, "count": count, "distance": attack_cfg.distance, **(config or {})}
    return report_from_detections(det_i, det_a, gts, tuple(thresholds), detector.config.categories,
                                  det_c if clean else None, cfg)


def asr(scenes, detector, mesh_init, mesh_adv, attack_cfg, iou_thresh: float, **kw) -> float:
    _check_thresh(iou_thresh)
    return evaluate(scenes, detector, mesh_init, mesh_adv, attack_cfg, (iou_thresh,), clean=False, **kw).asr[iou_thresh]


def sweep_distance(mesh_adv, mesh_init, distances, scenes, detector, attack_cfg, csv_path=None,
                   **kw) -> list[tuple[float, EvalReport]]:
    """One report per test distance, the mesh itself unchanged."""
    rows, table = [], []
    for d in distances:
        if not (0.0 <= d <= DEFAULT_D_MAX):
            raise ValueError(f"distance {d} outside [0, {DEFAULT_D_MAX}]")
        rep = evaluate(scenes, detector, mesh_init, mesh_adv, replace(attack_cfg, distance=float(d)),
                       clean=False, **kw)
        table.append((float(d), rep))
        rows += rep.rows(f"distance={d:g}")
    if csv_path is not None:
        write_report_csv(rows, csv_path)
    return table


def sweep_placement(mesh_adv, mesh_init, counts, scenes, detector, attack_cfg, csv_path=None, seed: int = 0,
                    **kw) -> list[tuple[int, EvalReport]]:
    """One report per number of randomly placed meshes."""
    rows, table = [], []
    for c in counts:
        if c < 1:
            raise ValueError("mesh count must be at least 1")
        rep = evaluate(scenes, detector, mesh_init, mesh_adv, attack_cfg, placement="random", count=int(c),
                       seed=seed, clean=False, **kw)
        table.append((int(c), rep))
        rows += rep.rows(f"count={c}")
    if csv_path is not None:
        write_report_csv(rows, csv_path)
    return table
