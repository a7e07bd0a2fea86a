"""End-to-end inference over a directory: stitch, ensemble, track, evaluate."""

from __future__ import annotations

import json
import logging
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .flowgen import label_to_flow
from .io import read_image, read_mask, read_raster, write_mask
from .metrics import EvalReport, ImageReport, evaluate_image, time_tolerance
from .stitcher import FramePredictor, StitchConfig, ensemble, stitch, tta_merge
from .tracker import TrackConfig, track

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".cft", ".png", ".pgm", ".tif", ".tiff")


class PredictorSpecError(ValueError):
    pass


def find_by_stem(directory, stem: str) -> Optional[Path]:
    for ext in IMAGE_SUFFIXES:
        p = Path(directory) / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def _resolve(path: str, stem: Optional[str]) -> Path:
    p = Path(path)
    if p.is_dir():
        if stem is None:
            raise PredictorSpecError(f"{path} is a directory but no image name was given")
        found = find_by_stem(p, stem)
        if found is None:
            raise PredictorSpecError(f"no file for {stem!r} in {path}")
        return found
    if not p.exists():
        raise PredictorSpecError(f"{path} does not exist")
    return p


def make_predictor(spec: str, stem: Optional[str] = None, seed: int = 0,
                   shape: Optional[Tuple[int, int]] = None) -> FramePredictor:
    """Build a predictor from ``oracle:<gt>``, ``oracle-noise:<gt>:<sigma>`` or ``tensor:<path>``.

    ``<gt>`` and ``<path>`` may be files or directories; directories are
    searched for a file named after ``stem``.
    """
    kind, _, arg = spec.partition(":")
    if not arg:
        raise PredictorSpecError(f"malformed predictor spec {spec!r}")
    if kind == "oracle":
        frame = label_to_flow(read_mask(_resolve(arg, stem))).as_prediction()
    elif kind == "oracle-noise":
        path, _, sigma = arg.rpartition(":")
        try:
            sigma = float(sigma)
        except ValueError:
            raise PredictorSpecError(f"bad noise level in {spec!r}") from None
        if not path or sigma < 0:
            raise PredictorSpecError(f"malformed predictor spec {spec!r}")
        frame = label_to_flow(read_mask(_resolve(path, stem))).as_prediction()
        rng = np.random.default_rng([seed, zlib.crc32((stem or "").encode())])
        frame = frame + rng.normal(0.0, sigma, size=frame.shape).astype(np.float32)
        frame[:, :, 0] = np.clip(frame[:, :, 0], 0.0, 1.0)
    elif kind == "tensor":
        frame = np.array(read_raster(_resolve(arg, stem)).array)
        if frame.shape[2] != 3:
            raise PredictorSpecError(f"tensor prediction needs 3 channels, got {frame.shape[2]}")
    else:
        raise PredictorSpecError(f"unknown predictor kind {kind!r}")
    if shape is not None and frame.shape[:2] != tuple(shape):
        raise PredictorSpecError(
            f"{spec}: prediction size {frame.shape[:2]} does not match image {tuple(shape)}"
        )
    return FramePredictor(frame)


def predict(image: np.ndarray, predictors: Sequence, stitch_cfg: StitchConfig) -> np.ndarray:
    run = tta_merge if stitch_cfg.tta else stitch
    outs = [run(p, image, stitch_cfg) for p in predictors]
    return outs[0] if len(outs) == 1 else ensemble(outs)


@dataclass
class PipelineConfig:
    input_dir: str
    output_dir: str
    predictors: List[str]
    gt_dir: Optional[str] = None
    stitch: StitchConfig = field(default_factory=StitchConfig)
    track: TrackConfig = field(default_factory=TrackConfig)
    seed: int = 0
    strict_budget: bool = False
    fail_fast: bool = False
    jobs: int = 1
    iou_threshold: float = 0.5
    strict_iou: bool = True
    micro: bool = False

    def validate(self) -> "PipelineConfig":
        if not Path(self.input_dir).is_dir():
            raise FileNotFoundError(f"input_dir {self.input_dir} is not a directory")
        if self.gt_dir is not None and not Path(self.gt_dir).is_dir():
            raise FileNotFoundError(f"gt_dir {self.gt_dir} is not a directory")
        if not self.predictors:
            raise ValueError("at least one predictor spec is required")
        for spec in self.predictors:
            kind, _, arg = spec.partition(":")
            path = arg.rpartition(":")[0] if kind == "oracle-noise" else arg
            if kind not in ("oracle", "oracle-noise", "tensor") or not path:
                raise PredictorSpecError(f"malformed predictor spec {spec!r}")
            if not Path(path).exists():
                raise FileNotFoundError(f"predictor path {path} does not exist")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        return self

    @classmethod
    def from_dict(cls, data: Dict) -> "PipelineConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known - {"eval"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        ev = data.pop("eval", {}) or {}
        data.setdefault("iou_threshold", ev.get("iou_threshold", 0.5))
        data.setdefault("strict_iou", ev.get("strict", True))
        data.setdefault("micro", ev.get("micro", False))
        data["stitch"] = StitchConfig(**(data.get("stitch") or {}))
        data["track"] = TrackConfig(**(data.get("track") or {}))
        preds = data.get("predictors", [])
        data["predictors"] = [preds] if isinstance(preds, str) else list(preds)
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["stitch"]["flips"] = list(d["stitch"]["flips"])
        return d


def list_images(directory) -> List[Path]:
    return sorted(p for p in Path(directory).iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def process_image(image: np.ndarray, predictor_specs: Sequence[str], stem: str,
                  cfg: PipelineConfig) -> np.ndarray:
    shape = image.shape[:2]
    predictors = [make_predictor(s, stem, cfg.seed, shape) for s in predictor_specs]
    pred = predict(image, predictors, cfg.stitch)
    return track(pred, cfg.track)


def _run_one(path: Path, cfg: PipelineConfig) -> ImageReport:
    stem = path.stem
    t0 = time.perf_counter()
    image = read_image(path)
    gt = None
    if cfg.gt_dir is not None:
        gt_path = find_by_stem(cfg.gt_dir, stem)
        gt = read_mask(gt_path) if gt_path is not None else None
    io = time.perf_counter() - t0

    t1 = time.perf_counter()
    mask = process_image(image, cfg.predictors, stem, cfg)
    wall = time.perf_counter() - t1

    t2 = time.perf_counter()
    ext = ".png" if mask.max() < 65536 else ".cft"
    write_mask(mask, Path(cfg.output_dir) / f"{stem}{ext}")
    io += time.perf_counter() - t2
    return evaluate_image(stem, gt, mask, wall, io, cfg.iou_threshold, cfg.strict_iou)


def _run_guarded(path: Path, cfg: PipelineConfig) -> ImageReport:
    try:
        return _run_one(path, cfg)
    except Exception as exc:
        if cfg.fail_fast:
            raise
        logger.error("%s failed: %s", path.name, exc)
        return ImageReport(path.stem, None, None, None, None, 0, 0.0, 0.0,
                           time_tolerance(1, 1), True, error=f"{type(exc).__name__}: {exc}")


def run_pipeline(cfg: PipelineConfig, report_path=None) -> EvalReport:
    """Run every image in ``cfg.input_dir``; masks and ``report.json`` go to ``cfg.output_dir``."""
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = list_images(cfg.input_dir)
    if cfg.jobs > 1 and len(paths) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            reports = list(pool.map(_run_guarded, paths, [cfg] * len(paths)))
    else:
        reports = [_run_guarded(p, cfg) for p in paths]
    report = EvalReport(reports, cfg.iou_threshold, cfg.strict_iou, cfg.micro)
    report_path = Path(report_path) if report_path else out / "report.json"
    with open(report_path, "w") as f:
        json.dump(report.to_dict(), f, indent=2)
    for r in reports:
        if r.error is None:
            logger.info("%s: %d instances, f1=%s, %.2fs / %.1fs budget", r.name,
                        r.n_instances, r.f1, r.wall_seconds, r.tolerance_seconds)
    return report


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("CELLFLOW_JOBS", "1")))
    except ValueError:
        return 1
