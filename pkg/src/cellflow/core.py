"""Domain types and instance bookkeeping shared by every module.

Conventions used across the package:

* images / probability maps / flows are ``float32`` arrays of shape ``(H, W, C)``
* label masks are ``uint32`` arrays of shape ``(H, W)``, 0 is background
* a prediction is an ``(H, W, 3)`` array: cell probability, then flow ``(dy, dx)``
  with ``y`` increasing downward
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

PROB, DY, DX = 0, 1, 2


@dataclass(frozen=True)
class Raster:
    """Immutable H x W x C grid of 32-bit floats.

    ``array`` is a read-only, C-contiguous ``float32`` view, so the flat data is
    row-major and channel-minor: ``value(r, c, ch) == flat[(r * W + c) * C + ch]``.
    """

    array: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.array)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"raster must be 2-D or 3-D, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"raster dimensions must be >= 1, got {arr.shape}")
        arr = np.array(arr, dtype=np.float32, order="C", copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "array", arr)

    @classmethod
    def from_flat(cls, height: int, width: int, channels: int, data) -> "Raster":
        data = np.asarray(data, dtype=np.float32).ravel()
        if data.size != height * width * channels:
            raise ValueError(
                f"data length {data.size} != {height}*{width}*{channels}"
            )
        return cls(data.reshape(height, width, channels))

    @property
    def height(self) -> int:
        return self.array.shape[0]

    @property
    def width(self) -> int:
        return self.array.shape[1]

    @property
    def channels(self) -> int:
        return self.array.shape[2]

    @property
    def flat(self) -> np.ndarray:
        return self.array.reshape(-1)

    def value(self, r: int, c: int, ch: int = 0) -> float:
        return float(self.flat[(r * self.width + c) * self.channels + ch])

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return self.array.shape == other.array.shape and np.array_equal(
            self.array.view(np.uint32), other.array.view(np.uint32)
        )

    __hash__ = None


@dataclass(frozen=True)
class InstanceRecord:
    id: int
    pixel_count: int
    centroid: Tuple[float, float]
    bbox: Tuple[int, int, int, int]  # r0, c0, r1, c1 (exclusive end)


def as_mask(mask) -> np.ndarray:
    """Coerce to a 2-D ``uint32`` label array, rejecting negative or fractional ids."""
    arr = np.asarray(mask)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise ValueError(f"label mask must be 2-D, got shape {arr.shape}")
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise ValueError("label mask contains non-integer values")
    if arr.dtype.kind in "if" and arr.size and arr.min() < 0:
        raise ValueError("label mask contains negative ids")
    return arr.astype(np.uint32, copy=False)


def as_image(image) -> np.ndarray:
    """Coerce to an ``(H, W, C)`` float32 array."""
    if isinstance(image, Raster):
        return image.array
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"image must be 2-D or 3-D, got shape {arr.shape}")
    return arr


def gray_view(image) -> np.ndarray:
    """Single-channel view of an image; multi-channel inputs are averaged."""
    arr = as_image(image)
    if arr.shape[2] == 1:
        return arr[:, :, 0]
    return arr.mean(axis=2, dtype=np.float64).astype(np.float32)


def _present_ids(mask: np.ndarray) -> np.ndarray:
    """Sorted distinct values of a uint32 mask (0 included if present)."""
    if mask.size == 0:
        return np.zeros(0, dtype=np.uint32)
    top = int(mask.max())
    if top <= 4 * mask.size + 1024:
        return np.flatnonzero(np.bincount(mask.ravel(), minlength=top + 1)).astype(np.uint32)
    return np.unique(mask)


def relabel_sequential(mask) -> np.ndarray:
    """Map nonzero ids onto ``1..K`` in ascending order of the original id."""
    mask = as_mask(mask)
    ids = _present_ids(mask)
    nonzero = ids[ids != 0]
    if nonzero.size == 0:
        return np.zeros(mask.shape, dtype=np.uint32)
    top = int(nonzero[-1])
    if top <= 4 * mask.size + 1024:
        lut = np.zeros(top + 1, dtype=np.uint32)
        lut[nonzero] = np.arange(1, nonzero.size + 1, dtype=np.uint32)
        return lut[mask]
    seq = np.searchsorted(nonzero, mask).astype(np.uint32) + 1
    seq[mask == 0] = 0
    return seq


def instance_ids(mask) -> np.ndarray:
    ids = _present_ids(as_mask(mask))
    return ids[ids != 0]


def extract_instances(mask) -> List[InstanceRecord]:
    mask = as_mask(mask)
    ids = instance_ids(mask)
    if ids.size == 0:
        return []
    seq = relabel_sequential(mask)
    k = ids.size
    flat = seq.ravel()
    rows, cols = np.indices(mask.shape)
    counts = np.bincount(flat, minlength=k + 1)[1:]
    sum_r = np.bincount(flat, weights=rows.ravel(), minlength=k + 1)[1:]
    sum_c = np.bincount(flat, weights=cols.ravel(), minlength=k + 1)[1:]
    records = []
    for i, sl in enumerate(ndimage.find_objects(seq, max_label=k)):
        records.append(
            InstanceRecord(
                id=int(ids[i]),
                pixel_count=int(counts[i]),
                centroid=(sum_r[i] / counts[i], sum_c[i] / counts[i]),
                bbox=(sl[0].start, sl[1].start, sl[0].stop, sl[1].stop),
            )
        )
    return records


def instance_slices(mask: np.ndarray) -> Sequence[Tuple[int, Tuple[slice, slice]]]:
    """``(id, bbox slices)`` for each nonzero id of an arbitrary (non-sequential) mask."""
    ids = instance_ids(mask)
    if ids.size == 0:
        return []
    seq = relabel_sequential(mask)
    objs = ndimage.find_objects(seq, max_label=ids.size)
    return list(zip((int(i) for i in ids), objs))
