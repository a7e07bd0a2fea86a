"""Whole-image prediction from patch predictions.

A predictor is any callable ``predictor(patch, window) -> (h, w, 3)`` where
``patch`` is an (h, w, C) float32 crop of the (reflect-padded) image and
``window`` its position in that padded frame. It may carry an ``activated``
attribute (default True); when False, channel 0 is passed through a sigmoid
before blending. Predictors that need the window position to look values up
in a full frame can also provide ``flipped(flip)`` returning the predictor to
use on a flipped image; others simply see flipped patches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, NamedTuple, Sequence, Tuple

import numpy as np

from .core import as_image

HORIZONTAL = "horizontal"
VERTICAL = "vertical"
IMPORTANCE_FLOOR = 1e-8


class Window(NamedTuple):
    r0: int
    c0: int
    h: int
    w: int

    @property
    def slices(self) -> Tuple[slice, slice]:
        return slice(self.r0, self.r0 + self.h), slice(self.c0, self.c0 + self.w)


@dataclass(frozen=True)
class StitchConfig:
    window: int = 512
    overlap: float = 0.6
    sigma_scale: float = 0.125
    tta: bool = False
    flips: Tuple[str, ...] = (HORIZONTAL, VERTICAL)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap must be in [0, 1), got {self.overlap}")
        if not self.sigma_scale > 0:
            raise ValueError(f"sigma_scale must be > 0, got {self.sigma_scale}")
        object.__setattr__(self, "flips", tuple(self.flips))
        for f in self.flips:
            if f not in (HORIZONTAL, VERTICAL):
                raise ValueError(f"unknown flip {f!r}")

    @property
    def stride(self) -> int:
        return max(1, int(math.floor(self.window * (1.0 - self.overlap) + 0.5)))


def _starts(size: int, window: int, stride: int) -> List[int]:
    if size <= window:
        return [0]
    starts = list(range(0, size - window, stride))
    starts.append(size - window)
    return starts


def padded_shape(h: int, w: int, cfg: StitchConfig) -> Tuple[int, int]:
    return max(h, cfg.window), max(w, cfg.window)


def plan_windows(h: int, w: int, cfg: StitchConfig = StitchConfig()) -> List[Window]:
    """Windows over the padded frame, row-major; the last start on each axis is clamped to the end."""
    if h < 1 or w < 1:
        raise ValueError("image size must be >= 1")
    ph, pw = padded_shape(h, w, cfg)
    rows = _starts(ph, cfg.window, cfg.stride)
    cols = _starts(pw, cfg.window, cfg.stride)
    return [Window(r, c, cfg.window, cfg.window) for r in rows for c in cols]


def gaussian_importance(h: int, w: int, sigma_scale: float = 0.125) -> np.ndarray:
    """(h, w, 1) separable Gaussian, 1 at the continuous patch center."""
    def axis(n):
        x = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
        return np.exp(-(x * x) / (2.0 * (sigma_scale * n) ** 2))

    imp = np.outer(axis(h), axis(w))
    return np.maximum(imp, IMPORTANCE_FLOOR).astype(np.float32)[:, :, None]


def pad_reflect(arr: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Reflect-pad the trailing rows/cols of ``arr`` up to ``shape``."""
    ph, pw = shape[0] - arr.shape[0], shape[1] - arr.shape[1]
    if ph == 0 and pw == 0:
        return arr
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (arr.ndim - 2)
    mode = "reflect" if min(arr.shape[:2]) > 1 else "edge"
    return np.pad(arr, pad, mode=mode)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def stitch(predictor: Callable, image, cfg: StitchConfig = StitchConfig()) -> np.ndarray:
    """Importance-weighted average of window predictions, cropped to the image."""
    image = as_image(image)
    h, w = image.shape[:2]
    frame = pad_reflect(image, padded_shape(h, w, cfg))
    ph, pw = frame.shape[:2]
    acc = np.zeros((ph, pw, 3), dtype=np.float64)
    norm = np.zeros((ph, pw, 1), dtype=np.float64)
    imp = gaussian_importance(cfg.window, cfg.window, cfg.sigma_scale).astype(np.float64)
    activated = getattr(predictor, "activated", True)
    for win in plan_windows(h, w, cfg):
        sl = win.slices
        out = np.asarray(predictor(np.ascontiguousarray(frame[sl]), win))
        if out.shape != (win.h, win.w, 3):
            raise ValueError(
                f"predictor returned {out.shape} for window {win}, expected {(win.h, win.w, 3)}"
            )
        out = out.astype(np.float64)
        if not activated:
            out[:, :, 0] = sigmoid(out[:, :, 0])
        acc[sl] += out * imp
        norm[sl] += imp
    return (acc / norm)[:h, :w].astype(np.float32)


def flip(arr: np.ndarray, which: str) -> np.ndarray:
    return arr[:, ::-1] if which == HORIZONTAL else arr[::-1, :]


def unflip_prediction(pred: np.ndarray, which: str) -> np.ndarray:
    """Undo a flip on a prediction, negating the flow component along the flipped axis."""
    out = np.array(flip(pred, which), dtype=np.float32)
    out[:, :, 2 if which == HORIZONTAL else 1] *= -1.0
    return out


def tta_merge(predictor: Callable, image, cfg: StitchConfig = StitchConfig()) -> np.ndarray:
    """Mean of the stitched identity view and each flipped view mapped back."""
    image = as_image(image)
    total = stitch(predictor, image, cfg).astype(np.float64)
    for which in cfg.flips:
        member = predictor.flipped(which) if hasattr(predictor, "flipped") else predictor
        out = stitch(member, np.ascontiguousarray(flip(image, which)), cfg)
        total += unflip_prediction(out, which)
    return (total / (1 + len(cfg.flips))).astype(np.float32)


def ensemble(preds: Sequence[np.ndarray]) -> np.ndarray:
    preds = [np.asarray(p, dtype=np.float32) for p in preds]
    if not preds:
        raise ValueError("ensemble needs at least one prediction")
    shape = preds[0].shape
    for p in preds[1:]:
        if p.shape != shape:
            raise ValueError(f"prediction shapes differ: {shape} vs {p.shape}")
    acc = np.zeros(shape, dtype=np.float64)
    for p in preds:
        acc += p
    return (acc / len(preds)).astype(np.float32)


class FramePredictor:
    """Serves windows cropped from a precomputed full-frame prediction.

    Backs the oracle and precomputed-tensor predictors; the frame is padded
    the same way the stitcher pads the image so window coordinates line up.
    """

    activated = True

    def __init__(self, frame: np.ndarray, activated: bool = True):
        frame = np.asarray(frame, dtype=np.float32)
        if frame.ndim != 3 or frame.shape[2] != 3:
            raise ValueError(f"frame must be (H, W, 3), got {frame.shape}")
        self.frame = frame
        self.activated = activated
        self._padded = {}

    def __call__(self, patch: np.ndarray, window: Window) -> np.ndarray:
        if patch.shape[:2] != (window.h, window.w):
            raise ValueError("patch does not match its window")
        shape = (max(self.frame.shape[0], window.r0 + window.h),
                 max(self.frame.shape[1], window.c0 + window.w))
        if shape not in self._padded:
            self._padded[shape] = pad_reflect(self.frame, shape)
        return self._padded[shape][window.slices]

    def flipped(self, which: str) -> "FramePredictor":
        """The prediction a flip-equivariant model would give on the flipped image."""
        frame = np.array(flip(self.frame, which), dtype=np.float32)
        frame[:, :, 2 if which == HORIZONTAL else 1] *= -1.0
        return FramePredictor(frame, self.activated)
