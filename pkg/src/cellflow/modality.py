"""Latent modality discovery over embedding vectors and balanced sampling weights."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence

import numpy as np

from .io import read_raster

# relative slack for the inertia monotonicity check (float rounding only)
_INERTIA_RTOL = 1e-10


@dataclass(frozen=True)
class EmbeddingSet:
    vectors: np.ndarray
    names: Sequence[str] = ()

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[1] < 1:
            raise ValueError(f"embeddings must be (n, d) with d >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("embeddings contain non-finite values")
        names = list(self.names) or [f"sample_{i}" for i in range(v.shape[0])]
        if len(names) != v.shape[0]:
            raise ValueError(f"{len(names)} names for {v.shape[0]} vectors")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "names", tuple(names))

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]


@dataclass
class ClusterModel:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    n_iter: int = 0
    inertia_history: List[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def load_embeddings(path) -> EmbeddingSet:
    """CSV rows ``name, v1, v2, ...`` or a CFT raster with one sample per row."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        names, rows = [], []
        with open(path, newline="") as f:
            for rec in csv.reader(f):
                if not rec or not "".join(rec).strip():
                    continue
                try:
                    vals = [float(x) for x in rec[1:]]
                except ValueError:
                    if not rows:  # header line
                        continue
                    raise
                names.append(rec[0])
                rows.append(vals)
        return EmbeddingSet(np.array(rows, dtype=np.float64), names)
    arr = read_raster(path).array
    return EmbeddingSet(arr.reshape(arr.shape[0], -1).astype(np.float64))


def _sq_dists(x: np.ndarray, c: np.ndarray, chunk_bytes: int = 1 << 25) -> np.ndarray:
    """Exact squared Euclidean distances, (n, k), computed in row chunks."""
    n, k = x.shape[0], c.shape[0]
    out = np.empty((n, k))
    step = max(1, chunk_bytes // (8 * k * x.shape[1]))
    for i in range(0, n, step):
        diff = x[i : i + step, None, :] - c[None, :, :]
        out[i : i + step] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = ((x - centers[0]) ** 2).sum(1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[j] = x[idx]
        closest = np.minimum(closest, ((x - centers[j]) ** 2).sum(1))
    return centers


def _assign(x, c):
    d = _sq_dists(x, c)
    a = d.argmin(1)
    return a, d[np.arange(x.shape[0]), a]


def kmeans(emb, k: int = 40, seed=None, max_iter: int = 300, tol: float = 1e-4) -> ClusterModel:
    """Lloyd's k-means from a seeded k-means++ start.

    Stops when no centroid moves by ``tol`` or more (Euclidean). A cluster that
    loses all members is moved onto the sample farthest from its own centroid.
    """
    if not isinstance(emb, EmbeddingSet):
        emb = EmbeddingSet(emb)
    x = emb.vectors
    n = x.shape[0]
    if k < 1 or n < k:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    c = kmeans_plus_plus(x, k, rng)
    a, d = _assign(x, c)
    history = [float(d.sum())]
    it = 0
    for it in range(1, max_iter + 1):
        new = np.zeros_like(c)
        np.add.at(new, a, x)
        counts = np.bincount(a, minlength=k)
        full = counts > 0
        new[full] /= counts[full, None]
        if not full.all():
            # refill empty clusters from the worst-fit samples
            resid = ((x - c[a]) ** 2).sum(1)
            taken = np.zeros(n, dtype=bool)
            for j in np.flatnonzero(~full):
                i = int(np.argmax(np.where(taken, -1.0, resid)))
                new[j] = x[i]
                taken[i] = True
        shift = np.sqrt(((new - c) ** 2).sum(1)).max()
        c = new
        a, d = _assign(x, c)
        inertia = float(d.sum())
        if inertia > history[-1] * (1 + _INERTIA_RTOL) + 1e-12:
            raise AssertionError(f"inertia increased at iteration {it}: {history[-1]} -> {inertia}")
        history.append(inertia)
        if shift < tol:
            break
    return ClusterModel(centroids=c, assignments=a, inertia=history[-1], n_iter=it,
                        inertia_history=history)


def amplified_weights(model: ClusterModel, alpha: float = 1.0) -> np.ndarray:
    """Per-sample weights that over-sample small clusters.

    ``w_i`` is proportional to ``|cluster(i)| ** -alpha`` and the weights sum
    to n. With ``alpha = 1`` every nonempty cluster carries total weight
    ``n / k_eff``; ``alpha = 0`` gives uniform weights.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    a = np.asarray(model.assignments)
    n = a.size
    counts = np.bincount(a, minlength=model.k).astype(np.float64)
    size = counts[a]
    if alpha == 1.0:
        k_eff = int((counts > 0).sum())
        return n / (k_eff * size)
    raw = size ** -alpha
    return raw * (n / raw.sum())


def cluster_summary(emb: EmbeddingSet, model: ClusterModel, weights: np.ndarray) -> dict:
    return {
        "k": model.k,
        "n": emb.n,
        "inertia": model.inertia,
        "n_iter": model.n_iter,
        "centroids": model.centroids.tolist(),
        "names": list(emb.names),
        "assignments": [int(c) for c in model.assignments],
        "weights": [float(w) for w in weights],
    }
