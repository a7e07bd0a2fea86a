"""``cellflow`` command line entry point."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path


from . import __version__
from .core import Raster
from .flowgen import label_to_flow
from .io import read_image, read_mask, read_raster, write_image, write_mask, write_raster
from .labelops import cell_intensity_diversify, shape_stats
from .metrics import EvalReport, evaluate_image, time_tolerance
from .modality import amplified_weights, cluster_summary, kmeans, load_embeddings
from .pipeline import (PipelineConfig, default_jobs, find_by_stem, list_images,
                       make_predictor, predict, run_pipeline)
from .stitcher import StitchConfig
from .synth import SynthSpec, synth_dataset
from .tracker import TrackConfig, track

logger = logging.getLogger("cellflow")


def _add_track_args(p, defaults=True):
    d = TrackConfig()
    g = p.add_argument_group("tracking")
    g.add_argument("--prob-threshold", type=float, default=d.prob_threshold if defaults else None)
    g.add_argument("--error-threshold", type=float, default=d.error_threshold if defaults else None)
    g.add_argument("--tile", type=int, default=d.tile if defaults else None)
    g.add_argument("--n-iters", type=int, default=d.n_iters if defaults else None)
    g.add_argument("--min-size", type=int, default=d.min_size if defaults else None)


def _track_overrides(args):
    keys = ("prob_threshold", "error_threshold", "tile", "n_iters", "min_size")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _add_stitch_args(p, defaults=True):
    d = StitchConfig()
    g = p.add_argument_group("stitching")
    g.add_argument("--window", type=int, default=d.window if defaults else None)
    g.add_argument("--overlap", type=float, default=d.overlap if defaults else None)
    g.add_argument("--sigma-scale", type=float, default=d.sigma_scale if defaults else None)
    g.add_argument("--tta", action="store_true", default=None)
    g.add_argument("--flips", default=None,
                   help="comma-separated subset of horizontal,vertical (default both)")


def _stitch_overrides(args):
    out = {k: getattr(args, k) for k in ("window", "overlap", "sigma_scale")
           if getattr(args, k, None) is not None}
    if args.tta is not None:
        out["tta"] = args.tta
    if args.flips is not None:
        out["flips"] = tuple(f for f in args.flips.split(",") if f)
    return out


def cmd_genflow(args):
    target = label_to_flow(read_mask(args.mask))
    write_raster(Raster(target.as_prediction()), args.out)
    return 0


def cmd_track(args):
    pred = read_raster(args.pred).array
    if pred.shape[2] != 3:
        raise SystemExit(f"{args.pred}: prediction needs 3 channels, got {pred.shape[2]}")
    mask = track(pred, TrackConfig(**_track_overrides(args)))
    write_mask(mask, args.out)
    print(f"{int(mask.max())} instances -> {args.out}")
    return 0


def cmd_infer(args):
    image = read_image(args.image)
    cfg = StitchConfig(**_stitch_overrides(args))
    stem = Path(args.image).stem
    preds = [make_predictor(s, stem, args.seed, image.shape[:2]) for s in args.predictor]
    write_raster(Raster(predict(image, preds, cfg)), args.out)
    return 0


def cmd_eval(args):
    report = EvalReport(iou_threshold=args.iou, strict=not args.non_strict, micro=args.micro)
    for pred_path in list_images(args.pred_dir):
        gt_path = find_by_stem(args.gt_dir, pred_path.stem)
        if gt_path is None:
            logger.warning("no ground truth for %s", pred_path.name)
            continue
        report.images.append(evaluate_image(pred_path.stem, read_mask(gt_path),
                                            read_mask(pred_path), iou_thr=args.iou,
                                            strict=not args.non_strict))
    with open(args.report, "w") as f:
        json.dump(report.to_dict(), f, indent=2)
    print(f"mean F1 {report.mean_f1} over {len(report.images)} images")
    return 0


def cmd_stats(args):
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "size", "eccentricity", "solidity"])
        for s in shape_stats(read_mask(args.mask)):
            w.writerow([s.id, s.size, f"{s.eccentricity:.6f}", f"{s.solidity:.6f}"])
    return 0


def cmd_augment(args):
    out = cell_intensity_diversify(read_image(args.image), read_mask(args.mask), seed=args.seed,
                                   p=args.p, lo=args.lo, hi=args.hi)
    write_image(out, args.out)
    return 0


def cmd_cluster(args):
    emb = load_embeddings(args.embeddings)
    model = kmeans(emb, k=args.k, seed=args.seed, max_iter=args.max_iter, tol=args.tol)
    weights = amplified_weights(model, alpha=args.alpha)
    with open(args.out, "w") as f:
        json.dump(cluster_summary(emb, model, weights), f, indent=2)
    return 0


def cmd_budget(args):
    print(f"{time_tolerance(args.height, args.width):.6f}")
    return 0


def cmd_synth(args):
    spec = SynthSpec(height=args.height, width=args.width, n_blobs=(args.min_blobs, args.max_blobs),
                     radius=(args.min_radius, args.max_radius),
                     touching_fraction=args.touching, noise=args.noise,
                     contamination=args.contamination)
    synth_dataset(args.n, args.seed, spec, out_dir=args.out)
    return 0


def cmd_pipeline(args):
    data = {}
    if args.config:
        with open(args.config) as f:
            data = json.load(f)
    for key in ("input_dir", "output_dir", "gt_dir", "seed"):
        if getattr(args, key) is not None:
            data[key] = getattr(args, key)
    if args.predictor:
        data["predictors"] = args.predictor
    data["stitch"] = {**(data.get("stitch") or {}), **_stitch_overrides(args)}
    data["track"] = {**(data.get("track") or {}), **_track_overrides(args)}
    if args.strict_budget:
        data["strict_budget"] = True
    if args.fail_fast:
        data["fail_fast"] = True
    data["jobs"] = args.jobs if args.jobs is not None else data.get("jobs", default_jobs())
    cfg = PipelineConfig.from_dict(data)
    report = run_pipeline(cfg, args.report)
    mean = report.mean_f1
    print(f"{len(report.images)} images, mean F1 {mean if mean is None else f'{mean:.4f}'}")
    failed = [r.name for r in report.images if r.error]
    if failed:
        print(f"failed: {', '.join(failed)}", file=sys.stderr)
    if cfg.strict_budget and not report.all_within_budget:
        print("budget exceeded", file=sys.stderr)
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cellflow", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("genflow", help="flow target (prob, dy, dx) from a label mask")
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_genflow)

    p = sub.add_parser("track", help="label mask from a 3-channel prediction")
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    _add_track_args(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("infer", help="sliding-window prediction for one image")
    p.add_argument("--image", required=True)
    p.add_argument("--predictor", required=True, action="append",
                   help="oracle:<gt>, oracle-noise:<gt>:<sigma> or tensor:<path>; repeat to ensemble")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_stitch_args(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="F1 of predicted masks against ground truth")
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--non-strict", action="store_true", help="count IoU == threshold as a match")
    p.add_argument("--micro", action="store_true", help="micro-average F1 over images")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="per-instance size, eccentricity and solidity as CSV")
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("augment", help="cell-aware intensity diversification")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--p", type=float, default=0.25)
    p.add_argument("--lo", type=float, default=1.0)
    p.add_argument("--hi", type=float, default=1.7)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("cluster", help="k-means over embeddings with balancing weights")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--k", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iter", type=int, default=300)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("budget", help="runtime tolerance in seconds for an image size")
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("synth", help="synthetic blob images with instance masks")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--min-blobs", type=int, default=30)
    p.add_argument("--max-blobs", type=int, default=80)
    p.add_argument("--min-radius", type=float, default=4.0)
    p.add_argument("--max-radius", type=float, default=30.0)
    p.add_argument("--touching", type=float, default=0.2)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--contamination", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pipeline", help="stitch, track and evaluate a directory of images")
    p.add_argument("--config", help="JSON config; flags override its values")
    p.add_argument("--input-dir")
    p.add_argument("--output-dir")
    p.add_argument("--gt-dir")
    p.add_argument("--predictor", action="append")
    p.add_argument("--report")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="worker processes (default $CELLFLOW_JOBS or 1)")
    p.add_argument("--strict-budget", action="store_true")
    p.add_argument("--fail-fast", action="store_true")
    _add_stitch_args(p, defaults=False)
    _add_track_args(p, defaults=False)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s [%(levelname)s] %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
