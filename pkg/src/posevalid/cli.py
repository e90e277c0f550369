"""Command-line front-end.

Exit codes: 0 success, 2 config error, 3 data error, 4 training error,
5 evaluation error.  All randomness comes from config/--seed values; reruns
with identical inputs produce byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import datagen, pipeline, rasterizer
from .errors import ConfigError, DataError, EvalError, PoseValidError, TrainingError
from .geometry import (
    TP_DIAMETER_FRACTION,
    identity_pose,
    load_pose,
    pose_distance,
    symmetry_group,
    Pose,
)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_mesh_info(args) -> int:
    cfg = pipeline.load_run_config(args.config)
    model = pipeline.build_object_model(cfg)
    evals = np.linalg.eigvalsh(model.lam)
    sym_dev = max(
        pose_distance(identity_pose(),
                      Pose(g, np.zeros(3)), model)
        for g in symmetry_group(model.symmetry))
    info = {
        "model_id": model.model_id,
        "symmetry": model.symmetry.to_json(),
        "triangles": int(len(model.mesh.faces)),
        "surface_samples": int(len(model.surface_samples)),
        "radius": model.radius,
        "diameter": model.diameter,
        "lambda_eigenvalues": [float(v) for v in evals],
        "max_symmetry_metric_deviation": float(sym_dev),
        "tp_distance_threshold": TP_DIAMETER_FRACTION * model.diameter,
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


def cmd_make_dataset(args) -> int:
    cfg = pipeline.load_run_config(args.config)
    model = pipeline.build_object_model(cfg)
    manifest = pipeline.make_dataset(cfg, args.split, model, log=_log)
    counts = manifest.counts
    print(f"dataset_{args.split}: {len(manifest.scenes)} scenes, "
          f"{counts['valid']} valid + {counts['invalid']} invalid detections "
          f"-> {cfg.out_path / ('dataset_' + args.split) / 'manifest.json'}")
    return 0


def cmd_distance(args) -> int:
    cfg = pipeline.load_run_config(args.config)
    model = pipeline.build_object_model(cfg)
    a = load_pose(args.pose_a)
    b = load_pose(args.pose_b)
    d = pose_distance(a, b, model)
    thr = TP_DIAMETER_FRACTION * model.diameter
    verdict = "valid (< 10% diameter)" if d < thr else "invalid (>= 10% diameter)"
    print(f"{d} {verdict}")
    return 0


def cmd_render(args) -> int:
    cfg = pipeline.load_run_config(args.config)
    model = pipeline.build_object_model(cfg)
    out_dir = cfg.out_path / "renders"
    scene = datagen.generate_scene(
        model, args.instances, cfg.camera, args.seed, out_dir,
        scene_id=f"render_{args.seed:04d}", box=cfg.scene_box)
    img = rasterizer.read_dpr(out_dir / scene.depth_path)
    rasterizer.write_pgm16(img, out_dir / f"{scene.scene_id}.pgm",
                           cfg.camera.near, cfg.camera.far)
    print(f"rendered {args.instances} instance(s) -> {out_dir / scene.depth_path} "
          f"(+ .pgm preview, {scene.cloud_path})")
    return 0


def cmd_train(args) -> int:
    cfg = pipeline.load_run_config(args.config)
    streams = ("depth", "cloud") if args.stream == "both" else (args.stream,)
    model = pipeline.build_object_model(cfg)
    results = pipeline.run_training(cfg, streams, model, log=_log)
    for stream, (_, history) in results.items():
        last = history[-1]
        print(f"{stream}: {len(history)} epochs, final loss {last['loss']:.4f}, "
              f"train acc {last['accuracy']:.4f}")
    return 0


def cmd_infer(args) -> int:
    cfg = pipeline.load_run_config(args.config)
    manifest_dir = Path(args.manifest).parent if args.manifest.endswith(".json") \
        else Path(args.manifest)
    out_path = Path(args.out) if args.out else cfg.out_path / "infer" / "annotated.json"
    model = pipeline.build_object_model(cfg)
    obj = pipeline.run_inference(cfg, manifest_dir, out_path, model, log=_log,
                                 overlays=args.overlays or None)
    n_valid = sum(1 for r in obj["records"] if r["pred_label"] == "valid")
    print(f"annotated {len(obj['records'])} detections "
          f"({n_valid} predicted valid) -> {out_path}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = pipeline.load_run_config(args.config)
    out_prefix = Path(args.out) if args.out else cfg.out_path / "eval" / "report"
    model = pipeline.build_object_model(cfg)
    summary = pipeline.run_evaluation(cfg, args.annotated, out_prefix, model)
    print(f"ACA {summary['aca']:.2f}%  OA {summary['oa']:.2f}%  "
          f"AP {summary['ap_before']:.2f}% -> {summary['ap_after']:.2f}% "
          f"(report at {out_prefix.with_suffix('.json')})")
    return 0


def cmd_report(args) -> int:
    rep = pipeline.combine_reports(args.inputs, args.out)
    from .evaluation import format_report

    print(format_report(rep), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="posevalid",
        description="Validate 6-dof pose detections with a two-stream classifier.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh-info", help="derived model quantities and symmetry check")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_mesh_info)

    p = sub.add_parser("make-dataset", help="generate scenes + labeled detections")
    p.add_argument("--config", required=True)
    p.add_argument("--split", choices=("train", "val"), default="train")
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("distance", help="pose metric between two pose JSON files")
    p.add_argument("--config", required=True)
    p.add_argument("--pose-a", required=True)
    p.add_argument("--pose-b", required=True)
    p.set_defaults(func=cmd_distance)

    p = sub.add_parser("render", help="render one scene to depth + PGM preview")
    p.add_argument("--config", required=True)
    p.add_argument("--instances", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train", help="train validator stream(s)")
    p.add_argument("--config", required=True)
    p.add_argument("--stream", choices=("depth", "cloud", "both"), default="both")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="annotate a manifest with validator probabilities")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True,
                   help="dataset directory or its manifest.json")
    p.add_argument("--out", default="")
    p.add_argument("--overlays", action="store_true",
                   help="also write per-scene TP/FP silhouette masks")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="ACA/OA and the AP replacement experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--annotated", required=True)
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="combine per-object reports into one table")
    p.add_argument("--out", required=True)
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_report)
    return ap


_EXIT_CODES = [
    (ConfigError, 2),
    (TrainingError, 4),
    (EvalError, 5),
    (DataError, 3),
]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PoseValidError as exc:
        for klass, code in _EXIT_CODES:
            if isinstance(exc, klass):
                print(f"error: {exc}", file=sys.stderr)
                return code
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
