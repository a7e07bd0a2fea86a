"""Evaluation: instance matching, F1, segmentation loss and the runtime budget."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import as_mask

REPORT_VERSION = 1
BCE_EPS = 1e-7


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: Tuple[Tuple[int, int, float], ...]  # (gt_id, pred_id, iou)


def iou_table(gt, pred):
    """Sparse IoU over co-occurring (gt, pred) id pairs.

    Returns ``(gt_ids, pred_ids, ious, gt_areas, pred_areas)`` where the first
    three arrays are aligned and list only pairs sharing at least one pixel.
    """
    gt, pred = as_mask(gt), as_mask(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"mask shapes differ: {gt.shape} vs {pred.shape}")
    g = gt.ravel().astype(np.uint64)
    p = pred.ravel().astype(np.uint64)
    g_ids, g_area = np.unique(g[g > 0], return_counts=True)
    p_ids, p_area = np.unique(p[p > 0], return_counts=True)
    both = (g > 0) & (p > 0)
    keys, inter = np.unique((g[both] << np.uint64(32)) | p[both], return_counts=True)
    kg = (keys >> np.uint64(32)).astype(np.int64)
    kp = (keys & np.uint64(0xFFFFFFFF)).astype(np.int64)
    ag = g_area[np.searchsorted(g_ids, kg)]
    ap = p_area[np.searchsorted(p_ids, kp)]
    ious = inter / (ag + ap - inter).astype(np.float64)
    return kg, kp, ious, dict(zip(g_ids.tolist(), g_area.tolist())), dict(
        zip(p_ids.tolist(), p_area.tolist())
    )


def match_instances(gt, pred, iou_thr: float = 0.5, strict: bool = True) -> MatchResult:
    """Greedy one-to-one matching by descending IoU.

    A pair qualifies when ``iou > iou_thr`` (``>=`` with ``strict=False``).
    For thresholds of 0.5 and above every mask can qualify with at most one
    counterpart, so the greedy result is the maximum matching.
    """
    kg, kp, ious, g_area, p_area = iou_table(gt, pred)
    ok = ious > iou_thr if strict else ious >= iou_thr
    kg, kp, ious = kg[ok], kp[ok], ious[ok]
    order = np.lexsort((kp, kg, -ious))
    used_g, used_p = set(), set()
    pairs = []
    for i in order:
        a, b = int(kg[i]), int(kp[i])
        if a in used_g or b in used_p:
            continue
        used_g.add(a)
        used_p.add(b)
        pairs.append((a, b, float(ious[i])))
    tp = len(pairs)
    return MatchResult(tp=tp, fp=len(p_area) - tp, fn=len(g_area) - tp, pairs=tuple(pairs))


def f1_score(match) -> float:
    tp, fp, fn = match.tp, match.fp, match.fn
    if tp == fp == fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def time_tolerance(height: int, width: int) -> float:
    """Allowed runtime in seconds: 10 s up to one megapixel, then 10 s per megapixel."""
    if height < 1 or width < 1:
        raise ValueError("height and width must be >= 1")
    pixels = height * width
    if pixels <= 1_000_000:
        return 10.0
    return pixels / 1e6 * 10.0


@dataclass(frozen=True)
class LossResult:
    bce: float
    mse: float
    total: float


def segmentation_loss(pred, target, lam: float = 0.5, flow_scale: float = 1.0) -> LossResult:
    """Cell-probability BCE plus ``lam`` times flow MSE.

    ``pred`` is an activated (H, W, 3) prediction; ``target`` a FlowTarget or an
    (H, W, 3) array in the same layout. ``flow_scale`` multiplies both the
    predicted and target flows before the MSE.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if hasattr(target, "as_prediction"):
        target = target.as_prediction()
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 3 or pred.shape[2] != 3:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} mismatch")
    p = np.clip(pred[:, :, 0], BCE_EPS, 1.0 - BCE_EPS)
    y = target[:, :, 0]
    bce = float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))
    diff = flow_scale * (pred[:, :, 1:] - target[:, :, 1:])
    mse = float(np.mean(diff * diff))
    return LossResult(bce=bce, mse=mse, total=bce + lam * mse)


@dataclass
class ImageReport:
    name: str
    f1: Optional[float]
    tp: Optional[int]
    fp: Optional[int]
    fn: Optional[int]
    n_instances: int
    wall_seconds: float
    io_seconds: float
    tolerance_seconds: float
    within_budget: bool
    error: Optional[str] = None


@dataclass
class EvalReport:
    images: List[ImageReport] = field(default_factory=list)
    iou_threshold: float = 0.5
    strict: bool = True
    micro: bool = False

    @property
    def mean_f1(self) -> Optional[float]:
        scored = [r for r in self.images if r.f1 is not None]
        if not scored:
            return None
        if self.micro:
            tp = sum(r.tp for r in scored)
            fp = sum(r.fp for r in scored)
            fn = sum(r.fn for r in scored)
            return f1_score(MatchResult(tp, fp, fn, ()))
        return float(np.mean([r.f1 for r in scored]))

    @property
    def all_within_budget(self) -> bool:
        return all(r.within_budget for r in self.images)

    def to_dict(self, timings: bool = True) -> Dict:
        images = []
        for r in self.images:
            d = asdict(r)
            if not timings:
                for key in ("wall_seconds", "io_seconds", "within_budget"):
                    d.pop(key)
            images.append(d)
        return {
            "report_version": REPORT_VERSION,
            "iou_threshold": self.iou_threshold,
            "strict_iou": self.strict,
            "aggregate": "micro" if self.micro else "mean",
            "mean_f1": self.mean_f1,
            "images": images,
        }


def evaluate_image(name: str, gt, pred, wall_seconds: float = 0.0, io_seconds: float = 0.0,
                   iou_thr: float = 0.5, strict: bool = True) -> ImageReport:
    pred = as_mask(pred)
    tol = time_tolerance(*pred.shape)
    n = int(np.unique(pred[pred > 0]).size)
    if gt is None:
        return ImageReport(name, None, None, None, None, n, wall_seconds, io_seconds,
                           tol, wall_seconds <= tol)
    m = match_instances(gt, pred, iou_thr, strict)
    return ImageReport(name, f1_score(m), m.tp, m.fp, m.fn, n, wall_seconds, io_seconds,
                       tol, wall_seconds <= tol)
