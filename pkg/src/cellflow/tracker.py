"""Gradient flow tracking: recover instance masks from a predicted flow field.

Pipeline per tile: follow the flows from every foreground pixel, seed
instances at peaks of the endpoint histogram, grow them by endpoint
proximity, then drop instances whose flows disagree with the flows their
own shape would generate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, NamedTuple

import numpy as np
from numba import njit
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .core import as_mask, relabel_sequential
from .flowgen import flow_error

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrackConfig:
    prob_threshold: float = 0.5
    n_iters: int = 200
    step: float = 1.0
    peak_min_count: int = 10
    merge_radius: int = 2
    error_threshold: float = 0.4
    tile: int = 2000
    min_size: int = 0

    def __post_init__(self):
        if not 0.0 < self.prob_threshold < 1.0:
            raise ValueError(f"prob_threshold must be in (0, 1), got {self.prob_threshold}")
        if not self.error_threshold > 0:
            raise ValueError(f"error_threshold must be > 0, got {self.error_threshold}")
        if self.tile < 256:
            raise ValueError(f"tile must be >= 256, got {self.tile}")
        if self.n_iters < 0 or self.merge_radius < 0 or self.peak_min_count < 1:
            raise ValueError("n_iters, merge_radius must be >= 0 and peak_min_count >= 1")


class Seed(NamedTuple):
    row: int
    col: int
    count: int


def _round(x):
    return np.floor(x + 0.5).astype(np.int64)


def normalize_flows(pred) -> np.ndarray:
    """Copy of ``pred`` with flow vectors scaled to unit length (zero stays zero)."""
    out = np.array(pred, dtype=np.float32, copy=True)
    fy = out[:, :, 1].astype(np.float64)
    fx = out[:, :, 2].astype(np.float64)
    mag = np.sqrt(fy * fy + fx * fx)
    ok = mag > 1e-12
    out[:, :, 1][ok] = fy[ok] / mag[ok]
    out[:, :, 2][ok] = fx[ok] / mag[ok]
    out[:, :, 1:][~ok] = 0.0
    return out


@njit(cache=True)
def _euler(flow, ys, xs, n_iter, step):
    h, w = flow.shape[0], flow.shape[1]
    out_y = np.empty(ys.size, dtype=np.float64)
    out_x = np.empty(xs.size, dtype=np.float64)
    for j in range(ys.size):
        y = float(ys[j])
        x = float(xs[j])
        for _ in range(n_iter):
            iy = int(np.floor(y + 0.5))
            ix = int(np.floor(x + 0.5))
            dy = flow[iy, ix, 0]
            dx = flow[iy, ix, 1]
            if dy == 0.0 and dx == 0.0:
                break
            y = min(max(y + step * dy, 0.0), h - 1.0)
            x = min(max(x + step * dx, 0.0), w - 1.0)
        out_y[j] = y
        out_x[j] = x
    return out_y, out_x


def foreground(pred, cfg: TrackConfig) -> np.ndarray:
    return np.asarray(pred)[:, :, 0] >= cfg.prob_threshold


def follow_flows(pred, cfg: TrackConfig = TrackConfig()) -> np.ndarray:
    """Integrate every foreground pixel along the flow for ``cfg.n_iters`` steps.

    Returns an (H, W, 2) float32 raster of final (y, x) positions; background
    pixels keep their own coordinates.
    """
    pred = np.asarray(pred, dtype=np.float32)
    h, w = pred.shape[:2]
    ends = np.empty((h, w, 2), dtype=np.float32)
    ends[:, :, 0], ends[:, :, 1] = np.indices((h, w), dtype=np.float32)
    ys, xs = np.nonzero(foreground(pred, cfg))
    if ys.size == 0:
        return ends
    flow = np.ascontiguousarray(pred[:, :, 1:3])
    py, px = _euler(flow, ys, xs, int(cfg.n_iters), float(cfg.step))
    ends[ys, xs, 0] = py
    ends[ys, xs, 1] = px
    return ends


def seed_peaks(endpoints, cfg: TrackConfig = TrackConfig(), fg=None) -> List[Seed]:
    """Local maxima of the endpoint histogram, strongest first.

    ``fg`` selects which pixels contribute endpoints (all pixels if omitted).
    Peaks within ``merge_radius`` (Chebyshev) of a stronger peak are dropped;
    equal counts are ordered by (row, col).
    """
    endpoints = np.asarray(endpoints)
    h, w = endpoints.shape[:2]
    if fg is None:
        fg = np.ones((h, w), dtype=bool)
    iy = _round(endpoints[:, :, 0][fg])
    ix = _round(endpoints[:, :, 1][fg])
    if iy.size == 0:
        return []
    hist = np.bincount(iy * w + ix, minlength=h * w).reshape(h, w)
    hmax = ndimage.maximum_filter(hist, size=3, mode="constant", cval=0)
    pr, pc = np.nonzero((hist == hmax) & (hist >= cfg.peak_min_count))
    counts = hist[pr, pc]
    order = np.lexsort((pc, pr, -counts))
    r = cfg.merge_radius
    kept: List[Seed] = []
    for i in order:
        row, col = int(pr[i]), int(pc[i])
        if any(max(abs(row - s.row), abs(col - s.col)) <= r for s in kept):
            continue
        kept.append(Seed(row, col, int(counts[i])))
    return kept


def _seed_map(shape, seeds: List[Seed], radius: int) -> np.ndarray:
    h, w = shape
    smap = np.zeros((h, w), dtype=np.uint32)
    best = np.full((h, w), np.inf)
    for k, s in enumerate(seeds, 1):
        r0, r1 = max(s.row - radius, 0), min(s.row + radius + 1, h)
        c0, c1 = max(s.col - radius, 0), min(s.col + radius + 1, w)
        yy, xx = np.mgrid[r0:r1, c0:c1]
        d2 = (yy - s.row) ** 2 + (xx - s.col) ** 2
        better = d2 < best[r0:r1, c0:c1]
        smap[r0:r1, c0:c1][better] = k
        best[r0:r1, c0:c1][better] = d2[better]
    return smap


def expand_masks(endpoints, seeds, cfg: TrackConfig = TrackConfig(), fg=None) -> np.ndarray:
    """Assign foreground pixels to seeds by where their endpoints landed.

    A pixel whose rounded endpoint is within ``merge_radius`` of a seed takes
    that seed's id (nearest seed wins). Leftover pixels repeatedly join the
    instance of the nearest assigned endpoint within ``3 * merge_radius``.
    """
    endpoints = np.asarray(endpoints)
    h, w = endpoints.shape[:2]
    labels = np.zeros((h, w), dtype=np.uint32)
    if len(seeds) == 0:
        return labels
    if fg is None:
        fg = np.ones((h, w), dtype=bool)
    ys, xs = np.nonzero(fg)
    if ys.size == 0:
        return labels
    ey = endpoints[ys, xs, 0].astype(np.float64)
    ex = endpoints[ys, xs, 1].astype(np.float64)
    smap = _seed_map((h, w), list(seeds), cfg.merge_radius)
    assigned = smap[np.clip(_round(ey), 0, h - 1), np.clip(_round(ex), 0, w - 1)]
    reach = 3.0 * cfg.merge_radius
    while True:
        todo = assigned == 0
        if not todo.any() or todo.all():
            break
        tree = cKDTree(np.column_stack((ey[~todo], ex[~todo])))
        d, j = tree.query(np.column_stack((ey[todo], ex[todo])), k=1)
        ok = d <= reach
        if not ok.any():
            break
        src = assigned[~todo]
        fill = assigned[todo]
        fill[ok] = src[j[ok]]
        assigned[todo] = fill
    labels[ys, xs] = assigned
    return labels


def filter_instances(mask, pred, cfg: TrackConfig = TrackConfig()) -> np.ndarray:
    """Remove instances whose flow error exceeds ``cfg.error_threshold``."""
    mask = np.array(as_mask(mask), copy=True)
    pred = np.asarray(pred, dtype=np.float32)
    if pred.shape[:2] != mask.shape:
        raise ValueError(f"prediction {pred.shape} and mask {mask.shape} differ in size")
    if cfg.min_size > 0:
        ids, counts = np.unique(mask, return_counts=True)
        small = ids[(counts < cfg.min_size) & (ids != 0)]
        if small.size:
            mask[np.isin(mask, small)] = 0
    errors = flow_error(mask, pred[:, :, 1:3])
    bad = [i for i, e in errors.items() if e > cfg.error_threshold]
    if bad:
        mask[np.isin(mask, bad)] = 0
    return relabel_sequential(mask)


def _track_tile(pred: np.ndarray, cfg: TrackConfig) -> np.ndarray:
    fg = foreground(pred, cfg)
    ends = follow_flows(pred, cfg)
    seeds = seed_peaks(ends, cfg, fg)
    return expand_masks(ends, seeds, cfg, fg)


def _seam_pairs(a: np.ndarray, b: np.ndarray):
    """Label pairs across a seam, where ``a`` and ``b`` are the two facing pixel lines."""
    pairs = []
    n = a.size
    for d in (-1, 0, 1):
        lo, hi = max(0, -d), min(n, n - d)
        la, lb = a[lo:hi], b[lo + d : hi + d]
        both = (la > 0) & (lb > 0)
        pairs.append(np.column_stack((la[both], lb[both])))
    return np.concatenate(pairs)


def merge_seams(labels: np.ndarray, tile: int) -> np.ndarray:
    """Union instances that touch across tile seams (8-neighbourhood), then relabel."""
    h, w = labels.shape
    pairs = [np.empty((0, 2), dtype=labels.dtype)]
    for c in range(tile, w, tile):
        pairs.append(_seam_pairs(labels[:, c - 1], labels[:, c]))
    for r in range(tile, h, tile):
        pairs.append(_seam_pairs(labels[r - 1, :], labels[r, :]))
    pairs = np.concatenate(pairs).astype(np.int64)
    n = int(labels.max()) + 1
    if pairs.size == 0:
        return relabel_sequential(labels)
    graph = coo_matrix(
        (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)
    )
    _, comp = connected_components(graph, directed=False)
    # representative = smallest label in each component, background stays 0
    rep = np.full(comp.max() + 1, n, dtype=np.int64)
    np.minimum.at(rep, comp, np.arange(n))
    lut = rep[comp].astype(np.uint32)
    lut[0] = 0
    return relabel_sequential(lut[labels])


def track(pred, cfg: TrackConfig = TrackConfig()) -> np.ndarray:
    """Full tracking of an activated prediction into a sequential label mask.

    Images larger than ``cfg.tile`` on either side are tracked on a grid of
    non-overlapping tiles; instances split by a seam are re-joined before
    the flow-error filter runs on the whole image.
    """
    pred = np.asarray(pred, dtype=np.float32)
    if pred.ndim != 3 or pred.shape[2] != 3:
        raise ValueError(f"prediction must be (H, W, 3), got {pred.shape}")
    h, w = pred.shape[:2]
    unit = normalize_flows(pred)
    if max(h, w) <= cfg.tile:
        labels = _track_tile(unit, cfg)
    else:
        labels = np.zeros((h, w), dtype=np.uint32)
        offset = 0
        for r0 in range(0, h, cfg.tile):
            for c0 in range(0, w, cfg.tile):
                sl = (slice(r0, r0 + cfg.tile), slice(c0, c0 + cfg.tile))
                lab = relabel_sequential(_track_tile(unit[sl], cfg))
                k = int(lab.max())
                lab[lab > 0] += np.uint32(offset)
                labels[sl] = lab
                offset += k
        logger.debug("tiled tracking: %d tile-local instances", offset)
        labels = merge_seams(labels, cfg.tile)
    return filter_instances(labels, pred, cfg)
