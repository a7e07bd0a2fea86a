"""Label transforms and per-instance shape statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .core import as_image, as_mask, instance_slices


@dataclass(frozen=True)
class ShapeStats:
    id: int
    size: int
    eccentricity: float  # minor / major axis ratio
    solidity: float


def boundary_exclusion(mask) -> np.ndarray:
    """Set every instance pixel with a 4-neighbour of a different id (incl. background) to 0.

    Pixels on the image border are not treated as boundary on that side.
    """
    mask = as_mask(mask)
    p = np.pad(mask, 1, mode="edge")
    center = p[1:-1, 1:-1]
    edge = (
        (p[:-2, 1:-1] != center)
        | (p[2:, 1:-1] != center)
        | (p[1:-1, :-2] != center)
        | (p[1:-1, 2:] != center)
    )
    out = mask.copy()
    out[edge] = 0
    return out


def cell_intensity_diversify(image, mask, seed=None, p: float = 0.25, lo: float = 1.0,
                             hi: float = 1.7) -> np.ndarray:
    """Randomly rescale each cell's intensity by its own factor in [lo, hi].

    One draw decides (with probability ``p``) whether the transform fires at
    all; if it does, factors are drawn per instance in ascending id order.
    The result is clipped to the input's maximum, and background pixels are
    returned untouched.
    """
    image = as_image(image)
    mask = as_mask(mask)
    if image.shape[:2] != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} differ in size")
    rng = np.random.default_rng(seed)
    out = np.array(image, dtype=np.float32, copy=True)
    if rng.random() >= p:
        return out
    ids = np.unique(mask)
    ids = ids[ids != 0]
    if ids.size == 0:
        return out
    factors = rng.uniform(lo, hi, size=ids.size)
    scale = np.ones(int(ids.max()) + 1, dtype=np.float64)
    scale[ids] = factors
    fg = mask != 0
    top = float(image.max())
    vals = image[fg].astype(np.float64) * scale[mask[fg]][:, None]
    out[fg] = np.minimum(vals, top).astype(np.float32)
    return out


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> List[tuple]:
    """Monotone chain hull, counter-clockwise, without repeated endpoint."""
    pts = sorted(set(map(tuple, points)))
    if len(pts) <= 2:
        return pts
    lower, upper = [], []
    for q in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], q) <= 0:
            lower.pop()
        lower.append(q)
    for q in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], q) <= 0:
            upper.pop()
        upper.append(q)
    return lower[:-1] + upper[:-1]


def polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    a = np.asarray(poly, dtype=np.float64)
    x, y = a[:, 0], a[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _hull_area(member: np.ndarray) -> float:
    # the hull of all pixel corners is spanned by each row's extreme pixels
    rows = np.flatnonzero(member.any(axis=1))
    left = member.argmax(axis=1)[rows]
    right = member.shape[1] - 1 - member[:, ::-1].argmax(axis=1)[rows]
    pts = []
    for r, c0, c1 in zip(rows.tolist(), left.tolist(), right.tolist()):
        pts += [(r, c0), (r + 1, c0), (r, c1 + 1), (r + 1, c1 + 1)]
    return polygon_area(convex_hull(pts))


def shape_stats(mask) -> List[ShapeStats]:
    mask = as_mask(mask)
    stats = []
    for id, sl in instance_slices(mask):
        member = mask[sl] == id
        rows, cols = np.nonzero(member)
        n = rows.size
        coords = np.stack([rows, cols]).astype(np.float64)
        cov = np.cov(coords, bias=True) if n > 1 else np.zeros((2, 2))
        lam = np.linalg.eigvalsh(cov)  # ascending
        lam_small, lam_big = max(lam[0], 0.0), lam[1]
        ecc = 1.0 if lam_big <= 0 else float(np.sqrt(lam_small / lam_big))
        stats.append(ShapeStats(id=id, size=int(n), eccentricity=min(ecc, 1.0),
                                solidity=n / _hull_area(member)))
    return stats
