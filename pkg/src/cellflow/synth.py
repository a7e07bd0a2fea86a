"""Deterministic synthetic blob images with instance masks.

Blobs are rotated ellipses painted onto free pixels only, so a blob placed
against an earlier one shares a boundary with it instead of overwriting it.
Contaminated regions are bright smudges in the image with no label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .io import write_image, write_mask


@dataclass(frozen=True)
class SynthSpec:
    height: int = 512
    width: int = 512
    n_blobs: Tuple[int, int] = (30, 80)
    radius: Tuple[float, float] = (4.0, 30.0)
    aspect: Tuple[float, float] = (0.6, 1.0)
    touching_fraction: float = 0.2
    noise: float = 0.05
    contamination: int = 0
    min_pixels: int = 20
    max_overlap: float = 0.25

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("image size must be positive")
        if not 0 <= self.n_blobs[0] <= self.n_blobs[1]:
            raise ValueError(f"bad blob count range {self.n_blobs}")
        if not 0 < self.radius[0] <= self.radius[1]:
            raise ValueError(f"bad radius range {self.radius}")
        if not 0 < self.aspect[0] <= self.aspect[1] <= 1:
            raise ValueError(f"bad aspect range {self.aspect}")
        if not 0 <= self.touching_fraction <= 1:
            raise ValueError("touching_fraction must be in [0, 1]")
        if self.noise < 0 or self.contamination < 0:
            raise ValueError("noise and contamination must be non-negative")


@dataclass
class _Blob:
    cy: float
    cx: float
    a: float
    b: float
    theta: float

    def radius_along(self, phi: float) -> float:
        # polar radius of the ellipse in world direction phi
        t = phi - self.theta
        return self.a * self.b / math.hypot(self.b * math.cos(t), self.a * math.sin(t))

    def pixels(self, h: int, w: int):
        r = int(math.ceil(self.a)) + 1
        r0, r1 = max(int(self.cy) - r, 0), min(int(self.cy) + r + 1, h)
        c0, c1 = max(int(self.cx) - r, 0), min(int(self.cx) + r + 1, w)
        if r0 >= r1 or c0 >= c1:
            return None
        yy, xx = np.mgrid[r0:r1, c0:c1]
        dy, dx = yy - self.cy, xx - self.cx
        ct, st = math.cos(self.theta), math.sin(self.theta)
        u = dx * ct + dy * st
        v = -dx * st + dy * ct
        inside = (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0
        return (slice(r0, r1), slice(c0, c1)), inside


def _largest_component(member: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(member)
    if n <= 1:
        return member
    sizes = np.bincount(lab.ravel())[1:]
    return lab == (1 + int(np.argmax(sizes)))


def synth_mask(rng: np.random.Generator, spec: SynthSpec) -> np.ndarray:
    h, w = spec.height, spec.width
    mask = np.zeros((h, w), dtype=np.uint32)
    target = int(rng.integers(spec.n_blobs[0], spec.n_blobs[1] + 1))
    placed: List[_Blob] = []
    attempts = 0
    while len(placed) < target and attempts < 50 * max(target, 1):
        attempts += 1
        a = rng.uniform(*spec.radius)
        b = max(spec.radius[0], a * rng.uniform(*spec.aspect))
        a, b = max(a, b), min(a, b)
        theta = rng.uniform(0.0, math.pi)
        touch = bool(placed) and rng.random() < spec.touching_fraction
        if touch:
            other = placed[int(rng.integers(len(placed)))]
            phi = rng.uniform(0.0, 2 * math.pi)
            blob = _Blob(0.0, 0.0, a, b, theta)
            d = other.radius_along(phi) + blob.radius_along(phi + math.pi) - 1.0
            blob.cy = other.cy + d * math.sin(phi)
            blob.cx = other.cx + d * math.cos(phi)
        else:
            blob = _Blob(rng.uniform(0, h), rng.uniform(0, w), a, b, theta)
        got = blob.pixels(h, w)
        if got is None:
            continue
        sl, inside = got
        if inside.sum() == 0:
            continue
        free = inside & (mask[sl] == 0)
        if 1.0 - free.sum() / inside.sum() > (0.5 if touch else spec.max_overlap):
            continue
        free = _largest_component(free)
        if free.sum() < spec.min_pixels:
            continue
        mask[sl][free] = len(placed) + 1
        placed.append(blob)
    return mask


def render_image(rng: np.random.Generator, mask: np.ndarray, spec: SynthSpec) -> np.ndarray:
    h, w = mask.shape
    k = int(mask.max())
    level = np.concatenate(([0.1], rng.uniform(0.4, 1.0, size=k)))
    img = level[mask]
    # interior shading so cells are brighter toward their middle
    dist = ndimage.distance_transform_edt(mask > 0)
    img = img * (0.8 + 0.2 * np.tanh(dist / 4.0))
    for _ in range(spec.contamination):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        s = rng.uniform(10, 40)
        yy, xx = np.ogrid[:h, :w]
        img = img + 0.8 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, None).astype(np.float32)[:, :, None]


def synth_pair(seed: int, spec: SynthSpec = SynthSpec()) -> Tuple[np.ndarray, np.ndarray]:
    """One (image, mask) pair fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    mask = synth_mask(rng, spec)
    return render_image(rng, mask, spec), mask


def synth_dataset(n_images: int, seed: int, spec: SynthSpec = SynthSpec(),
                  out_dir: Optional[str] = None):
    """Generate ``n_images`` pairs; image ``i`` depends only on ``(seed, i)``.

    With ``out_dir``, writes ``images/img_XXXX.cft`` and ``masks/img_XXXX.png``
    (``.cft`` when ids exceed the 16-bit range).
    """
    pairs = []
    for i in range(n_images):
        rng = np.random.default_rng([seed, i])
        mask = synth_mask(rng, spec)
        image = render_image(rng, mask, spec)
        pairs.append((image, mask))
    if out_dir is not None:
        root = Path(out_dir)
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
        for i, (image, mask) in enumerate(pairs):
            name = f"img_{i:04d}"
            write_image(image, root / "images" / f"{name}.cft")
            ext = ".png" if mask.max() < 65536 else ".cft"
            write_mask(mask, root / "masks" / f"{name}{ext}")
    return pairs
