"""Command-line entry point: ``advmesh <command> [flags]``.

Exit codes: 0 success, 2 configuration or usage error, 3 data error (missing or
malformed input files), 4 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

log = logging.getLogger("advmesh")


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="advmesh", description="Adversarial mesh attacks on a toy BEV detector.",
                                formatter_class=fmt)
    p.add_argument("--config", help="TOML or JSON run configuration; flags override its values")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP worker threads")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenes", help="write synthetic scene JSON files", formatter_class=fmt)
    g.add_argument("--n", type=int, required=True, help="number of scenes")
    g.add_argument("--seed", type=int, default=0, help="seed of the first scene; scene k uses seed+k")
    g.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train-detector", help="train the BEV detector", formatter_class=fmt)
    t.add_argument("--scenes", required=True, help="scene directory or file")
    t.add_argument("--out", required=True, help="checkpoint path (.npz)")
    t.add_argument("--epochs", type=int, default=None, help="override [detector].epochs (default 20)")
    t.add_argument("--lr", type=float, default=None, help="override [detector].lr (default 2e-3)")
    t.add_argument("--seed", type=int, default=None, help="override [detector].seed (default 0)")

    a = sub.add_parser("attack", help="optimize a universal adversarial mesh", formatter_class=fmt)
    a.add_argument("--scenes", required=True)
    a.add_argument("--detector", required=True, help="detector checkpoint")
    a.add_argument("--shape", choices=("cylinder", "cube", "sphere"), default=None,
                   help="initial primitive (default cylinder)")
    a.add_argument("--out", required=True, help="run directory")
    a.add_argument("--lr", type=float, default=None, help="Adam learning rate (default 0.02)")
    a.add_argument("--cap", type=float, default=None, help="per-vertex displacement cap (default 0.1)")
    a.add_argument("--alpha", type=float, default=None, help="localization loss weight (default 1)")
    a.add_argument("--beta", type=float, default=None, help="feature-similarity loss weight (default 1)")
    a.add_argument("--distance", type=float, default=None, help="mesh-to-corner distance (default 0.1)")
    a.add_argument("--meshes-per-frame", type=int, default=None, help="targets per frame (default 4)")
    a.add_argument("--epochs", type=int, default=None, help="epochs (default 10)")
    a.add_argument("--seed", type=int, default=None, help="scene-order seed (default 0)")
    a.add_argument("--no-occlusion", action="store_true", help="skip occlusion carving")

    e = sub.add_parser("eval", help="ASR and AP of a trained mesh", formatter_class=fmt)
    e.add_argument("--scenes", required=True)
    e.add_argument("--detector", required=True)
    e.add_argument("--mesh", required=True, help="adversarial mesh OBJ")
    e.add_argument("--shape", choices=("cylinder", "cube", "sphere"), default=None,
                   help="primitive the mesh started from (the 'init' baseline)")
    e.add_argument("--thresholds", type=_floats, default=None, help="IoU thresholds, e.g. 0.2,0.3,0.5,0.7")
    e.add_argument("--distance", type=float, default=None)
    e.add_argument("--out", default=None, help="CSV report path (default: print only)")

    s = sub.add_parser("sweep", help="distance or placement-count sweep", formatter_class=fmt)
    s.add_argument("--mode", choices=("distance", "placement"), required=True)
    s.add_argument("--scenes", required=True)
    s.add_argument("--detector", required=True)
    s.add_argument("--mesh", required=True)
    s.add_argument("--shape", choices=("cylinder", "cube", "sphere"), default=None)
    s.add_argument("--distances", type=_floats, default=None, help="default 0.1,0.5,1,2,3")
    s.add_argument("--counts", type=_ints, default=None, help="default 1,2,4,8")
    s.add_argument("--thresholds", type=_floats, default=None)
    s.add_argument("--out", required=True, help="CSV path; an SVG chart is written next to it")

    r = sub.add_parser("render-debug", help="write one composited adversarial image", formatter_class=fmt)
    r.add_argument("--scene", required=True, help="scene JSON file")
    r.add_argument("--mesh", required=True, help="mesh OBJ")
    r.add_argument("--camera", type=int, default=0, help="camera index")
    r.add_argument("--out", required=True, help="PNG path")
    r.add_argument("--distance", type=float, default=None)
    r.add_argument("--no-occlusion", action="store_true")
    return p


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise CliError("--threads must be at least 1", EXIT_CONFIG)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _ensure_dir(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create directory {path}: {exc.strerror}", EXIT_CONFIG) from None
    if not os.access(path, os.W_OK):
        raise CliError(f"directory not writable: {path}", EXIT_CONFIG)


def _parent_dir(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    _ensure_dir(parent)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads(args.threads)
        return _dispatch(args)
    except CliError as exc:
        print(f"advmesh: {exc}", file=sys.stderr)
        return exc.code


def _dispatch(args) -> int:
    # heavy imports after the thread cap is in the environment
    from .attack import NumericError
    from .config import ConfigError, load_config
    from .detector import DetectorError
    from .mesh import MeshError, PlacementError
    from .scene import SceneError

    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    except NumericError as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from None
    except (FileNotFoundError, IsADirectoryError) as exc:
        raise CliError(f"{exc.filename}: {exc.strerror}", EXIT_DATA) from None
    except (MeshError, DetectorError, SceneError, PlacementError, json.JSONDecodeError, KeyError) as exc:
        raise CliError(f"bad input data: {exc}", EXIT_DATA) from None


def _load_scenes(path: str):
    from .scene import load_scenes

    if not os.path.exists(path):
        raise FileNotFoundError(2, "No such file or directory", path)
    scenes = load_scenes(path)
    return scenes


def _load_detector(path: str, cfg):
    from .detector import DetectorParams

    if not os.path.exists(path):
        raise FileNotFoundError(2, "No such file or directory", path)
    return DetectorParams.load(path, expect_grid=cfg.detector.grid())


def _load_mesh(path: str, shape: str):
    from .mesh import MeshError, init_primitive, load_obj

    if not os.path.exists(path):
        raise FileNotFoundError(2, "No such file or directory", path)
    adv = load_obj(path)
    init = init_primitive(shape)
    if adv.n_vertices != init.n_vertices or not (adv.faces == init.faces).all():
        raise MeshError(f"{path}: topology does not match the {shape} primitive")
    adv.base_vertices = init.vertices.data.copy()
    return init, adv


def cmd_gen_scenes(args, cfg) -> int:
    from .scene import generate_scene, make_camera_rig, save_scenes

    if args.n < 0:
        raise CliError("--n must be non-negative", EXIT_CONFIG)
    _ensure_dir(args.out)
    sc = cfg.scene
    cams = make_camera_rig(sc.n_cameras, sc.camera_height, sc.fov_deg, tuple(sc.image_size))
    grid = cfg.detector.grid()
    scenes = [generate_scene(args.seed + k, sc.n_vehicles, sc.n_other, cameras=cams,
                             x_range=grid.x_range, y_range=grid.y_range) for k in range(args.n)]
    save_scenes(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def cmd_train(args, cfg) -> int:
    from .detector import DetectorParams, train_detector
    from .evaluation import write_report_csv

    cfg.override("detector", epochs=args.epochs, lr=args.lr, seed=args.seed)
    scenes = _load_scenes(args.scenes)
    _parent_dir(args.out)
    d = cfg.detector
    params = DetectorParams.init(d.model(), seed=d.seed)
    res = train_detector(scenes, params, epochs=d.epochs, lr=d.lr, batch_size=d.batch_size, seed=d.seed,
                         progress=lambda e, l: log.info("epoch %d loss %.4f", e, l))
    res.params.save(args.out, extra={"epoch_losses": res.epoch_losses})
    cfg.save(args.out + ".config.json")
    rows = [{"epoch": k + 1, "loss": v} for k, v in enumerate(res.epoch_losses)]
    write_report_csv(rows, args.out + ".losses.csv", columns=("epoch", "loss"))
    if res.diverged:
        raise CliError("training diverged (non-finite loss); last finite parameters saved", EXIT_NUMERIC)
    print(f"trained {len(res.epoch_losses)} epochs, final loss {res.epoch_losses[-1]:.4f}; saved {args.out}")
    return 0


def cmd_attack(args, cfg) -> int:
    from .attack import run_attack
    from .mesh import init_primitive
    from .plots import line_chart

    cfg.override("attack", shape=args.shape, lr=args.lr, displacement_cap=args.cap, alpha=args.alpha,
                  beta=args.beta, distance=args.distance, meshes_per_frame=args.meshes_per_frame,
                  epochs=args.epochs, seed=args.seed, occlusion=False if args.no_occlusion else None)
    scenes = _load_scenes(args.scenes)
    detector = _load_detector(args.detector, cfg)
    _ensure_dir(args.out)
    cfg.save(os.path.join(args.out, "run_config.json"))
    mesh = init_primitive(cfg.attack.shape)
    res = run_attack(scenes, detector, cfg.attack.model(), mesh, args.out,
                     progress=lambda e, l: log.info("epoch %d total %.4f", e, l.total))
    ep = list(range(1, len(res.epoch_losses) + 1))
    line_chart({name: (ep, [getattr(l, name) for l in res.epoch_losses])
                for name in ("loss_cls", "loss_loc", "loss_sim", "total")},
               os.path.join(args.out, "losses.svg"), "attack losses", "epoch", "loss")
    print(f"attack finished: total loss {res.epoch_losses[0].total:.4f} -> {res.epoch_losses[-1].total:.4f}; "
          f"outputs in {args.out}")
    return 0


def _print_report(rep) -> None:
    print(f"{'IoU':>5} {'ASR':>8} {'N_init':>7} {'N_adv':>6}")
    for t in sorted(rep.asr):
        print(f"{t:>5.2f} {rep.asr[t]:>8.3f} {rep.n_init[t]:>7d} {rep.n_adv[t]:>6d}")
    print("vehicle AP  init: " + "  ".join(f"@{t}={v:.3f}" for t, v in rep.ap_vehicle_init.items())
          + "   adv: " + "  ".join(f"@{t}={v:.3f}" for t, v in rep.ap_vehicle.items()))
    print("AP@0.3 per category (clean / init / adv): " + "  ".join(
        f"{c}={rep.ap_category_clean.get(c, float('nan')):.3f}/{rep.ap_category_init[c]:.3f}/"
        f"{rep.ap_category[c]:.3f}" for c in rep.ap_category))


def cmd_eval(args, cfg) -> int:
    from .evaluation import evaluate, write_report_csv

    cfg.override("attack", shape=args.shape, distance=args.distance)
    if args.thresholds is not None:
        cfg.override("eval", thresholds=tuple(args.thresholds))
    scenes = _load_scenes(args.scenes)
    detector = _load_detector(args.detector, cfg)
    init, adv = _load_mesh(args.mesh, cfg.attack.shape)
    ev = cfg.eval
    rep = evaluate(scenes, detector, init, adv, cfg.attack.model(), ev.thresholds, ev.score_threshold,
                   ev.nms_radius, config={"mesh": os.path.basename(args.mesh)})
    _print_report(rep)
    if args.out:
        _parent_dir(args.out)
        write_report_csv(rep.rows(os.path.basename(args.mesh)), args.out)
        cfg.save(args.out + ".config.json")
    return 0


def cmd_sweep(args, cfg) -> int:
    from .evaluation import sweep_distance, sweep_placement
    from .plots import line_chart

    cfg.override("attack", shape=args.shape)
    cfg.override("eval", distances=tuple(args.distances) if args.distances else None,
                 counts=tuple(args.counts) if args.counts else None,
                 thresholds=tuple(args.thresholds) if args.thresholds else None)
    scenes = _load_scenes(args.scenes)
    detector = _load_detector(args.detector, cfg)
    init, adv = _load_mesh(args.mesh, cfg.attack.shape)
    _parent_dir(args.out)
    ev = cfg.eval
    kw = dict(thresholds=ev.thresholds, score_threshold=ev.score_threshold, nms_radius=ev.nms_radius)
    if args.mode == "distance":
        table = sweep_distance(adv, init, ev.distances, scenes, detector, cfg.attack.model(), args.out, **kw)
        xlabel = "distance (m)"
    else:
        table = sweep_placement(adv, init, ev.counts, scenes, detector, cfg.attack.model(), args.out,
                                seed=ev.seed, **kw)
        xlabel = "meshes per frame"
    xs = [x for x, _ in table]
    line_chart({f"ASR@{t}": (xs, [rep.asr[t] for _, rep in table]) for t in ev.thresholds},
               os.path.splitext(args.out)[0] + ".svg", f"{args.mode} sweep", xlabel, "ASR")
    cfg.save(args.out + ".config.json")
    for x, rep in table:
        print(f"{xlabel}={x:g}: " + "  ".join(f"ASR@{t}={rep.asr[t]:.3f}" for t in sorted(rep.asr)))
    return 0


def cmd_render_debug(args, cfg) -> int:
    import dataclasses

    from . import autodiff as ad
    from .attack import adversarial_images, frame_poses
    from .images import save_png
    from .mesh import load_obj
    from .scene import Scene

    cfg.override("attack", distance=args.distance, occlusion=False if args.no_occlusion else None)
    if not os.path.exists(args.scene):
        raise FileNotFoundError(2, "No such file or directory", args.scene)
    if not os.path.exists(args.mesh):
        raise FileNotFoundError(2, "No such file or directory", args.mesh)
    scene = Scene.load(args.scene)
    if not 0 <= args.camera < len(scene.cameras):
        raise CliError(f"camera index {args.camera} outside [0, {len(scene.cameras)})", EXIT_CONFIG)
    mesh = load_obj(args.mesh)
    acfg = cfg.attack.model()
    _, poses = frame_poses(scene, [mesh], acfg)
    one = dataclasses.replace(scene, cameras=[scene.cameras[args.camera]], _raw={})
    with ad.no_grad():
        img = adversarial_images(one, mesh, poses, acfg)[0].data
    _parent_dir(args.out)
    save_png(img, args.out)
    print(f"wrote {args.out}")
    return 0


COMMANDS = {"gen-scenes": cmd_gen_scenes, "train-detector": cmd_train, "attack": cmd_attack,
            "eval": cmd_eval, "sweep": cmd_sweep, "render-debug": cmd_render_debug}


if __name__ == "__main__":
    sys.exit(main())
