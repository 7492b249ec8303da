"""Command-line entry point: ``cqdet <subcommand> [--config PATH] [--seed N] [--out PATH]``.

Structured results go to ``--out`` (JSON, JSON lines or binary depending on
the subcommand) or to stdout.  Subcommands that accept ``--figures DIR``
render PNG figures there as well.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attention import AttentionParams, asa_forward
from .errors import DetectorError
from .geometry import EgoMotion, RefState, lift_detection, project_many
from .gradcheck import KERNELS, check_gradients
from .io import (load_attention, load_config, load_detections, load_pyramid, load_queue,
                 load_rig, rig_to_records, save_detections, save_pyramid, save_queue, save_rig)
from .pipeline import FramePrediction, ModelWeights, empty_queue, run_frame
from .sampling import bilinear_sample
from .scene import SceneFrame, evaluate, gen_scene, make_ring_rig
from .temporal import propagate_states

log = logging.getLogger("cqdet")


# ---------------------------------------------------------------- helpers

def _emit(args, payload) -> None:
    """Lists become JSON lines (one record per line); anything else one JSON object."""
    if isinstance(payload, (list, np.ndarray)):
        text = "\n".join(json.dumps(rec, default=_json_default) for rec in payload)
    else:
        text = json.dumps(payload, indent=2, default=_json_default)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    else:
        print(text)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _configs(args):
    pcfg, scfg = load_config(args.config)
    if args.seed is not None:
        pcfg = pcfg.replace(seed=args.seed)
    return pcfg, scfg


def _rig(args, scfg):
    if getattr(args, "rig", None):
        return load_rig(args.rig)
    return make_ring_rig(scfg.n_cameras, scfg.image_size, scfg.fov_deg,
                         scfg.camera_height, scfg.camera_radius)


def _read_points(arg: str) -> np.ndarray:
    """Either a JSON file path or an inline JSON array."""
    path = Path(arg)
    text = path.read_text() if path.exists() else arg
    return np.atleast_2d(np.asarray(json.loads(text), dtype=np.float64))


def _figures_dir(args):
    d = getattr(args, "figures", None)
    if d:
        Path(d).mkdir(parents=True, exist_ok=True)
        return Path(d)
    return None


# ------------------------------------------------------------ subcommands

def cmd_project(args) -> int:
    _, scfg = _configs(args)
    rig = _rig(args, scfg)
    pts = _read_points(args.points)
    if pts.shape[1] < 3:
        raise DetectorError("points need at least three coordinates")
    out = []
    for cam in rig:
        uv, depth, vis = project_many(cam, pts[:, :3])
        u, v = uv[:, 0], uv[:, 1]
        for i in range(len(pts)):
            inside = bool(vis[i] and 0 <= u[i] < cam.width and 0 <= v[i] < cam.height)
            out.append({"point": i, "camera_id": cam.camera_id, "u": u[i], "v": v[i],
                        "depth": depth[i], "in_front": bool(vis[i]), "in_image": inside})
    _emit(args, [{k: (None if isinstance(v, float) and not np.isfinite(v) else v)
                  for k, v in rec.items()} for rec in out])
    return 0


def cmd_lift(args) -> int:
    _, scfg = _configs(args)
    rig = {c.camera_id: c for c in _rig(args, scfg)}
    out = []
    for det in load_detections(args.detections):
        if det.camera_id not in rig:
            raise DetectorError(f"detection references unknown camera {det.camera_id}")
        out.append(lift_detection(rig[det.camera_id], det).as_array())
    _emit(args, [s.tolist() for s in out])
    return 0


def cmd_propagate(args) -> int:
    ego = EgoMotion.from_yaw(args.yaw, args.translation)
    if args.queue:
        q = load_queue(args.queue)
        out = [{"timestamp": g.timestamp,
                "states": propagate_states(g.states, ego, args.dt)} for g in q.groups]
    else:
        states = _read_points(args.states)
        for s in states:
            RefState.from_array(s)  # validates
        out = propagate_states(states, ego, args.dt)
    _emit(args, out)
    return 0


def cmd_attend(args) -> int:
    pcfg, _ = _configs(args)
    rng = np.random.default_rng(pcfg.seed)
    if args.weights:
        p = load_attention(args.weights, pcfg.modulation, pcfg.log_space)
    else:
        p = AttentionParams.random(pcfg.d, pcfg.heads, pcfg.seed, pcfg.modulation,
                                   pcfg.eps_layers, pcfg.log_space)
    x = rng.normal(size=(args.queries, p.d))
    centers = rng.uniform(-args.extent, args.extent, size=(args.queries, 3))
    y, w = asa_forward(x, centers, p, return_weights=True)
    dist = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
    mean_dist = float(np.mean(np.sum(w * dist[None], axis=-1)))
    _emit(args, {"modulation": p.modulation, "queries": args.queries, "d": p.d,
                 "heads": p.heads, "output_norm": float(np.linalg.norm(y)),
                 "row_sum_max_err": float(np.max(np.abs(w.sum(-1) - 1.0))),
                 "attention_weighted_distance": mean_dist})
    figs = _figures_dir(args)
    if figs:
        from .plotting import plot_attention, plot_kernels
        plot_attention(w, figs / "attention_head0.png")
        plot_kernels(figs / "modulation_kernels.png")
    return 0


def cmd_sample(args) -> int:
    pcfg, scfg = _configs(args)
    if args.pyramid:
        pyr = load_pyramid(args.pyramid)
    else:
        pyr = gen_scene(pcfg.seed, scfg).frames[0].pyramid
    out = []
    for fm in pyr.maps:
        if fm.camera_id == args.camera:
            out.append({"level": fm.level, "shape": list(fm.data.shape),
                        "value": bilinear_sample(fm, args.u, args.v)})
    if not out:
        raise DetectorError(f"pyramid has no maps for camera {args.camera}")
    _emit(args, sorted(out, key=lambda r: r["level"]))
    return 0


def _frames_from_files(args, scfg):
    """Single frame assembled from --rig / --detections / --pyramid files."""
    rig = _rig(args, scfg)
    pyr = load_pyramid(args.pyramid)
    dets = tuple(load_detections(args.detections)) if args.detections else ()
    frame = SceneFrame(0, 0.0, EgoMotion.identity(), np.zeros((0, 9)), np.zeros(0, int),
                       dets, pyr)
    return rig, [frame]


def cmd_pipeline(args) -> int:
    pcfg, scfg = _configs(args)
    if args.frames is not None:
        scfg = scfg.__class__.from_dict({**scfg.to_dict(), "n_frames": args.frames})
    if args.pyramid:
        rig, frames = _frames_from_files(args, scfg)
        have_truth = False
    else:
        scene = gen_scene(pcfg.seed, scfg)
        rig, frames = scene.rig, list(scene.frames)
        have_truth = True
    weights = ModelWeights.random(pcfg, pcfg.seed)
    queue = empty_queue(pcfg)
    chain: list[EgoMotion] = []
    figs = _figures_dir(args)
    metrics_fh = open(args.emit_metrics, "w") if args.emit_metrics else None
    records, dumps = [], []
    try:
        for k, frame in enumerate(frames):
            if k > 0:
                chain = (chain + [frame.ego_from_prev])[-pcfg.queue_length:]
            pred, queue = run_frame(frame, queue, pcfg, weights, rig, chain)
            dumps.append(pred.to_bytes())
            rec = _frame_record(pred, frame, have_truth, args.threshold, args.score_min)
            records.append(rec)
            if metrics_fh:
                metrics_fh.write(json.dumps(rec) + "\n")
                metrics_fh.flush()
            log.info("frame %d: %s", frame.index, rec)
            if figs:
                from .plotting import plot_bev
                plot_bev(frame, pred, rig, figs / f"bev_frame{frame.index:03d}.png",
                         score_min=args.score_min)
    finally:
        if metrics_fh:
            metrics_fh.close()
    if figs and have_truth and len(records) > 1:
        from .plotting import plot_metrics
        plot_metrics(records, figs / "metrics.png")
    if args.out:
        Path(args.out).write_bytes(b"".join(dumps))
    if args.save_queue:
        save_queue(args.save_queue, queue)
    if not args.out and not args.emit_metrics:
        for rec in records:
            print(json.dumps(rec))
    return 0


def _frame_record(pred: FramePrediction, frame, have_truth: bool, threshold: float,
                  score_min: float) -> dict:
    rec = {"frame": pred.frame_index, "n_queries": len(pred), "n_global": pred.n_global,
           "n_adaptive": pred.n_adaptive, "n_temporal": pred.n_temporal,
           "mean_score": float(np.mean(pred.scores)) if len(pred) else 0.0}
    if have_truth:
        # adaptive queries before decoding are the geometric baseline
        init = pred.initial
        mask = np.array([k == "adaptive" for k in init.kinds], dtype=bool)
        base = evaluate(init.states[mask], frame.boxes, threshold)
        keep = pred.scores >= score_min
        dec = evaluate(pred.states[keep], frame.boxes, threshold)
        rec.update({"n_truth": dec.n_truth, "recall": dec.recall, "precision": dec.precision,
                    "mean_center_error": dec.mean_center_error,
                    "adaptive_recall": base.recall,
                    "adaptive_center_error": base.mean_center_error})
    return rec


def cmd_verify(args) -> int:
    from .verify import CHECKS
    import time
    seed = 0 if args.seed is None else args.seed
    results, ok = [], True
    for fn in CHECKS:
        t0 = time.perf_counter()
        res = fn(seed=seed)
        res.seconds = time.perf_counter() - t0
        print(res.line(), flush=True)
        results.append(res)
        ok &= bool(res.passed)
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    if args.out:
        Path(args.out).write_text("".join(
            json.dumps({"key": r.key, "title": r.title, "passed": bool(r.passed),
                        "seconds": r.seconds, "details": r.details},
                       default=_json_default) + "\n" for r in results))
    return 0 if ok else 1


def cmd_gradcheck(args) -> int:
    kernels = KERNELS if args.kernel == "all" else (args.kernel,)
    seed = 0 if args.seed is None else args.seed
    reports = [check_gradients(k, args.trials, args.step, seed) for k in kernels]
    lines = [json.dumps(r.to_dict()) for r in reports]
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    else:
        print("\n".join(lines))
    figs = _figures_dir(args)
    if figs:
        from .plotting import plot_gradcheck
        plot_gradcheck(reports, figs / "gradcheck.png")
    return 0 if all(r.passed for r in reports) else 1


def cmd_gen_scene(args) -> int:
    pcfg, scfg = _configs(args)
    seed = pcfg.seed
    scene = gen_scene(seed, scfg)
    out = Path(args.out or "scene")
    out.mkdir(parents=True, exist_ok=True)
    save_rig(out / "rig.json", scene.rig)
    truth = []
    for fr in scene.frames:
        save_detections(out / f"detections_{fr.index:03d}.json", fr.detections)
        save_pyramid(out / f"pyramid_{fr.index:03d}.bin", fr.pyramid)
        truth.append({"frame": fr.index, "timestamp": fr.timestamp,
                      "ego_from_prev": {"rotation": fr.ego_from_prev.rotation,
                                        "translation": fr.ego_from_prev.translation},
                      "boxes": fr.boxes, "class_ids": fr.class_ids})
    (out / "truth.json").write_text(json.dumps(
        {"seed": seed, "scene": scfg.to_dict(), "frames": truth}, default=_json_default))
    figs = _figures_dir(args)
    if figs:
        from .plotting import plot_bev
        for fr in scene.frames:
            plot_bev(fr, None, scene.rig, figs / f"scene_frame{fr.index:03d}.png")
    print(json.dumps({"out": str(out), "frames": len(scene.frames),
                      "cameras": len(rig_to_records(scene.rig)),
                      "boxes": [int(len(f.boxes)) for f in scene.frames]}))
    return 0


# ----------------------------------------------------------------- parser

def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with optional 'pipeline' and 'scene' sections")
    common.add_argument("--seed", type=_seed, default=None)
    common.add_argument("--out", help="output path (stdout if omitted)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cqdet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("project", parents=[common], help="project world points into every camera")
    p.add_argument("--points", required=True, help="JSON array of [x, y, z] (inline or file)")
    p.add_argument("--rig", help="rig JSON (default: ring rig from the scene config)")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("lift", parents=[common], help="lift 2D detections to 3D reference states")
    p.add_argument("--detections", required=True)
    p.add_argument("--rig")
    p.set_defaults(func=cmd_lift)

    p = sub.add_parser("propagate", parents=[common], help="ego-compensate states or a queue dump")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--states", help="JSON array of 9-vectors (inline or file)")
    src.add_argument("--queue", help="binary queue snapshot")
    p.add_argument("--yaw", type=float, default=0.0)
    p.add_argument("--translation", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    p.add_argument("--dt", type=float, default=0.0)
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("attend", parents=[common], help="run adaptive self-attention on random queries")
    p.add_argument("--queries", type=int, default=32)
    p.add_argument("--extent", type=float, default=20.0, help="half-width of the center cube [m]")
    p.add_argument("--weights", help="binary attention weights file")
    p.add_argument("--figures")
    p.set_defaults(func=cmd_attend)

    p = sub.add_parser("sample", parents=[common], help="bilinear lookups at every pyramid level")
    p.add_argument("--pyramid")
    p.add_argument("--camera", type=int, default=0)
    p.add_argument("--u", type=float, required=True)
    p.add_argument("--v", type=float, required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("pipeline", parents=[common], help="run the decoder over a scene")
    p.add_argument("--frames", type=int, help="override the scene's frame count")
    p.add_argument("--pyramid", help="binary feature pyramid (single-frame mode)")
    p.add_argument("--rig")
    p.add_argument("--detections")
    p.add_argument("--emit-metrics", help="write one JSON metrics record per frame")
    p.add_argument("--figures", help="directory for BEV and metric figures")
    p.add_argument("--save-queue", help="write the final memory queue snapshot")
    p.add_argument("--threshold", type=float, default=1.0, help="matching distance [m]")
    p.add_argument("--score-min", type=float, default=0.5)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("verify", parents=[common], help="run every acceptance check")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--kernel", choices=("all",) + KERNELS, default="all")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--step", type=float)
    p.add_argument("--figures")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-scene", parents=[common], help="write a synthetic scene to a directory")
    p.add_argument("--figures")
    p.set_defaults(func=cmd_gen_scene)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DetectorError, ValueError, KeyError, OSError) as exc:
        print(f"cqdet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
