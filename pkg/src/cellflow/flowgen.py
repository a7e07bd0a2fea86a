"""Flow targets from instance masks.

Each instance gets a heat map by repeatedly injecting heat at its center pixel
and averaging over the 4-neighbourhood inside the instance. The normalized
spatial gradient of ``log(1 + heat)`` is the flow target; following it from
any member pixel leads to the center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, NamedTuple, Tuple

import numpy as np
from numba import njit

from .core import as_mask, instance_slices, relabel_sequential

MIN_DIFFUSION_ITERS = 20
GRAD_EPS = 1e-12


class MissingInstanceError(LookupError):
    pass


@dataclass(frozen=True)
class FlowTarget:
    """Ground-truth targets for one mask.

    cell_prob : (H, W) float32, 1 on instances and 0 on background
    flow      : (H, W, 2) float32 unit vectors (dy, dx), zero on background
    heat      : (H, W) float32, ``log(1 + heat)`` of each instance's diffusion
    """

    cell_prob: np.ndarray
    flow: np.ndarray
    heat: np.ndarray

    def as_prediction(self, flow_scale: float = 1.0) -> np.ndarray:
        out = np.empty(self.cell_prob.shape + (3,), dtype=np.float32)
        out[:, :, 0] = self.cell_prob
        out[:, :, 1:] = self.flow * np.float32(flow_scale)
        return out


class HeatPatch(NamedTuple):
    heat: np.ndarray  # log(1 + heat) over the instance bbox
    origin: Tuple[int, int]


def _center_of(rows: np.ndarray, cols: np.ndarray) -> Tuple[int, int]:
    my, mx = np.median(rows), np.median(cols)
    i = int(np.argmin((rows - my) ** 2 + (cols - mx) ** 2))
    return int(rows[i]), int(cols[i])


def cell_center(mask, id) -> Tuple[int, int]:
    """Member pixel nearest to the per-axis median of the instance's pixels.

    Ties go to the first such pixel in row-major order.
    """
    mask = as_mask(mask)
    rows, cols = np.nonzero(mask == id)
    if rows.size == 0 or id == 0:
        raise MissingInstanceError(f"instance {id} not present in mask")
    return _center_of(rows, cols)


def diffusion_iters(height: int, width: int) -> int:
    return max(MIN_DIFFUSION_ITERS, int(math.ceil(2.0 * math.hypot(height, width))))


@njit(cache=True)
def _diffuse(member, cy, cx, n_iter):
    h, w = member.shape
    heat = np.zeros((h, w))
    nxt = np.zeros((h, w))
    for _ in range(n_iter):
        heat[cy, cx] += 1.0
        for r in range(h):
            for c in range(w):
                if not member[r, c]:
                    nxt[r, c] = 0.0
                    continue
                s = heat[r, c]
                if r > 0:
                    s += heat[r - 1, c]
                if r < h - 1:
                    s += heat[r + 1, c]
                if c > 0:
                    s += heat[r, c - 1]
                if c < w - 1:
                    s += heat[r, c + 1]
                nxt[r, c] = s / 5.0
        heat, nxt = nxt, heat
    return heat


def _padded_member(member: np.ndarray) -> np.ndarray:
    return np.pad(member, 1, mode="constant", constant_values=False)


def _instance_heat(member: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Diffuse over a bbox-cropped boolean instance; returns (padded member, log heat)."""
    rows, cols = np.nonzero(member)
    cy, cx = _center_of(rows, cols)
    pm = _padded_member(member)
    n_iter = diffusion_iters(*member.shape)
    heat = _diffuse(pm, cy + 1, cx + 1, n_iter)
    return pm, np.log1p(heat)


def _one_axis_grad(t: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    # t, m padded by one pixel, so shifted neighbours never wrap into data
    fwd = np.roll(t, -1, axis=axis)
    bwd = np.roll(t, 1, axis=axis)
    has_fwd = np.roll(m, -1, axis=axis)
    has_bwd = np.roll(m, 1, axis=axis)
    g = np.zeros_like(t)
    both = has_fwd & has_bwd
    g[both] = 0.5 * (fwd[both] - bwd[both])
    only_fwd = has_fwd & ~has_bwd
    g[only_fwd] = fwd[only_fwd] - t[only_fwd]
    only_bwd = has_bwd & ~has_fwd
    g[only_bwd] = t[only_bwd] - bwd[only_bwd]
    g[~m] = 0.0
    return g


def _instance_flow(member: np.ndarray):
    pm, t = _instance_heat(member)
    gy = _one_axis_grad(t, pm, 0)
    gx = _one_axis_grad(t, pm, 1)
    mag = np.sqrt(gy * gy + gx * gx)
    ok = mag > GRAD_EPS
    fy = np.zeros_like(gy)
    fx = np.zeros_like(gx)
    fy[ok] = gy[ok] / mag[ok]
    fx[ok] = gx[ok] / mag[ok]
    return t[1:-1, 1:-1], fy[1:-1, 1:-1], fx[1:-1, 1:-1]


def pseudo_diffusion(mask, id) -> HeatPatch:
    """``log(1 + heat)`` of one instance over its bounding box."""
    mask = as_mask(mask)
    if id == 0:
        raise MissingInstanceError("id 0 is background")
    rows, cols = np.nonzero(mask == id)
    if rows.size == 0:
        raise MissingInstanceError(f"instance {id} not present in mask")
    r0, r1 = rows.min(), rows.max() + 1
    c0, c1 = cols.min(), cols.max() + 1
    member = mask[r0:r1, c0:c1] == id
    _, t = _instance_heat(member)
    heat = t[1:-1, 1:-1].astype(np.float32)
    heat[~member] = 0.0
    return HeatPatch(heat, (int(r0), int(c0)))


def label_to_flow(mask) -> FlowTarget:
    mask = as_mask(mask)
    h, w = mask.shape
    flow = np.zeros((h, w, 2), dtype=np.float32)
    heat = np.zeros((h, w), dtype=np.float32)
    for id, sl in instance_slices(mask):
        member = mask[sl] == id
        t, fy, fx = _instance_flow(member)
        fpatch = flow[sl]
        fpatch[member, 0] = fy[member]
        fpatch[member, 1] = fx[member]
        heat[sl][member] = t[member]
    cell_prob = (mask != 0).astype(np.float32)
    return FlowTarget(cell_prob=cell_prob, flow=flow, heat=heat)


def flow_error(mask, flow_pred) -> Dict[int, float]:
    """Per-instance mean over member pixels of ``|flow_pred - ideal flow|^2``.

    The squared difference is summed over both flow channels, so a zero
    prediction scores ``mean(|ideal|^2)`` which is about 1 for most cells.
    """
    mask = as_mask(mask)
    flow_pred = np.asarray(flow_pred, dtype=np.float32)
    if flow_pred.shape != mask.shape + (2,):
        raise ValueError(
            f"flow shape {flow_pred.shape} does not match mask {mask.shape} + (2,)"
        )
    ids = np.unique(mask)
    ids = ids[ids != 0]
    if ids.size == 0:
        return {}
    ideal = label_to_flow(mask).flow
    diff = flow_pred.astype(np.float64) - ideal.astype(np.float64)
    sq = (diff * diff).sum(axis=2)
    seq = relabel_sequential(mask).ravel()
    k = ids.size
    sums = np.bincount(seq, weights=sq.ravel(), minlength=k + 1)[1:]
    counts = np.bincount(seq, minlength=k + 1)[1:]
    return {int(i): float(s / n) for i, s, n in zip(ids, sums, counts)}
