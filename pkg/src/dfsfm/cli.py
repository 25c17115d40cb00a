"""Command-line entry point: ``dfsfm <subcommand>``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import colmap_io
from .config import PipelineConfig, load_config
from .errors import SfMError
from .evaluation import evaluate_model
from .matching import write_match_file
from .pipeline import (
    format_metrics,
    list_images,
    load_inputs,
    match_images,
    refine_model,
    run_pipeline,
    write_metrics,
)

log = logging.getLogger("dfsfm")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--threads", type=int, help="worker threads for track refinement")
    p.add_argument("--export-coarse", action="store_true", help="also write the coarse model")
    p.add_argument("-v", "--verbose", action="store_true")


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if args.export_coarse:
        cfg.export_coarse = True
    for attr in ("match_file", "image_dir", "intrinsics_file", "output_dir"):
        val = getattr(args, attr, None)
        if val is not None:
            setattr(cfg, attr, val)
    return cfg


def cmd_match(args) -> int:
    cfg = _config(args)
    names = list_images(cfg.image_dir)
    images = {i: colmap_io.load_image(os.path.join(cfg.image_dir, n)) for i, n in enumerate(names)}
    pairs = match_images(images, cfg.r, args.min_confidence)
    write_match_file(args.output, pairs, dict(enumerate(names)))
    print(f"wrote {sum(len(p) for p in pairs)} matches over {len(pairs)} pairs to {args.output}")
    return 0


def cmd_map(args) -> int:
    cfg = _config(args)
    cfg.refine_iterations = 0
    res = run_pipeline(cfg)
    print(format_metrics(res.metrics), end="")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    inputs = load_inputs(cfg)
    gt_poses = gt_cloud = None
    if args.gt:
        gt = colmap_io.read_model(args.gt)
        # ground truth is keyed by image name
        ids = {n: i for i, n in inputs.names.items()}
        gt_poses = {ids[gt.image_names[i]]: p for i, p in gt.poses.items() if gt.image_names[i] in ids}
        if args.gt_cloud:
            gt_cloud = colmap_io.read_ply(args.gt_cloud)
    res = run_pipeline(cfg, inputs, gt_poses=gt_poses, gt_cloud=gt_cloud)
    print(format_metrics(res.metrics), end="")
    return 0


def cmd_refine(args) -> int:
    cfg = _config(args)
    model = colmap_io.read_model(args.model)
    images = {}
    for iid, name in model.image_names.items():
        images[iid] = colmap_io.load_image(os.path.join(cfg.image_dir, name))
    model.intrinsics_known = cfg.intrinsics_known
    refine_model(model, images, cfg)
    out = Path(cfg.output_dir or args.model)
    colmap_io.write_model(model, out / "model")
    colmap_io.model_ply(model, out / "points.ply")
    print(f"refined model: {len(model.poses)} images, {len(model.points)} points, "
          f"mean reprojection error {model.mean_reprojection_error():.4f} px")
    return 0


def cmd_eval(args) -> int:
    model = colmap_io.read_model(args.model)
    gt = colmap_io.read_model(args.gt)
    # match images by name
    ids = {n: i for i, n in model.image_names.items()}
    gt_poses = {ids.get(gt.image_names[i], -1 - i): p for i, p in gt.poses.items()}
    cloud = colmap_io.read_ply(args.gt_cloud) if args.gt_cloud else None
    thresholds = tuple(float(v) for v in args.auc_thresholds.split(","))
    report = evaluate_model(model, gt_poses, cloud, auc_thresholds=thresholds)
    text = format_metrics(report.as_metrics())
    if args.output:
        write_metrics(args.output, report.as_metrics())
    print(text, end="")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import generate_synthetic_scene, write_synthetic_dataset

    scene = generate_synthetic_scene(seed=args.seed or 0, n_cameras=args.cameras, n_points=args.points,
                                     noise_px=args.noise, image_size=(args.width, args.height))
    write_synthetic_dataset(scene, args.output, seed=args.seed or 0, cloud_spacing=args.cloud_spacing)
    print(f"wrote synthetic dataset with {args.cameras} images to {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dfsfm", description="Detector-free structure from motion")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="images -> match file with the built-in grid matcher")
    _common(p)
    p.add_argument("--images", dest="image_dir", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--min-confidence", type=float, default=0.8)
    p.set_defaults(func=cmd_match)

    for name, func, helptext in (("map", cmd_map, "match file -> coarse model"),
                                 ("run", cmd_run, "end-to-end reconstruction")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--matches", dest="match_file")
        p.add_argument("--images", dest="image_dir")
        p.add_argument("--intrinsics", dest="intrinsics_file")
        p.add_argument("--output", dest="output_dir", required=True)
        if name == "run":
            p.add_argument("--gt", help="ground-truth model directory for evaluation")
            p.add_argument("--gt-cloud", help="ground-truth point cloud (PLY)")
        p.set_defaults(func=func)

    p = sub.add_parser("refine", help="model + images -> refined model")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--images", dest="image_dir", required=True)
    p.add_argument("--output", dest="output_dir")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="model + ground truth -> metrics")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--gt-cloud")
    p.add_argument("--auc-thresholds", default="1,3,5")
    p.add_argument("--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--output", required=True)
    p.add_argument("--cameras", type=int, default=10)
    p.add_argument("--points", type=int, default=500)
    p.add_argument("--noise", type=float, default=0.0, help="match noise std in px")
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=480)
    p.add_argument("--cloud-spacing", type=float, default=0.005, help="ground-truth cloud sampling step")
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SfMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
