"""K-means concept vocabulary over pooled feature vectors.

A cluster model is trained once on globally averaged (GAP) activations
from a tile corpus and then reused as a shared set of concept prototypes,
so that segmentations of different images agree on what each label means.
Training is Lloyd's algorithm with k-means++ seeding, several restarts,
and farthest-point revival of empty clusters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, FstFormatError, InputError, InsufficientDataError
from .tensor_io import DenseMatrix, FeatureTensor, LabelMask, read_fst, write_fst


def gap_pool(tensor: FeatureTensor) -> np.ndarray:
    """Per-channel mean over all spatial positions; length ``channels``."""
    return tensor.data.astype(np.float64).mean(axis=(0, 1)).astype(np.float32)


@dataclass(frozen=True)
class KMeansConfig:
    k: int
    seed: int = 17
    max_iters: int = 300
    tol: float = 1e-4
    n_init: int = 4

    def __post_init__(self):
        if self.k < 2:
            raise InputError(f"k must be at least 2, got {self.k}")
        if self.n_init < 1:
            raise InputError(f"n_init must be positive, got {self.n_init}")
        if self.max_iters < 1:
            raise InputError(f"max_iters must be positive, got {self.max_iters}")
        if self.tol < 0:
            raise InputError(f"tol must be non-negative, got {self.tol}")


@dataclass(frozen=True, eq=False)
class ClusterModel:
    """k cluster centers in channel space plus provenance metadata."""

    centers: DenseMatrix
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        c = self.centers.data
        if (c < 0).any():
            raise InputError("cluster centers must be non-negative")
        zero = np.flatnonzero((c * c).sum(axis=1) == 0)
        if zero.size:
            raise InputError(f"cluster center rows {zero.tolist()} are all-zero")

    @property
    def k(self) -> int:
        return self.centers.n_rows

    @property
    def channels(self) -> int:
        return self.centers.n_cols


def _coerce_points(points) -> np.ndarray:
    if isinstance(points, DenseMatrix):
        arr = points.data
    else:
        arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"points must form a 2-d matrix, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise InputError("points contain NaN or Inf")
    return arr.astype(np.float64, copy=False)


def _pairwise_sq(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = x @ c.T
    d *= -2.0
    d += (x * x).sum(axis=1)[:, None]
    d += (c * c).sum(axis=1)[None, :]
    np.maximum(d, 0.0, out=d)
    return d


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: D^2-weighted draws from the seeded generator."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining mass sits on already-chosen points (duplicates)
            centers[j] = x[rng.integers(n)]
            continue
        r = rng.random() * total
        idx = min(int(np.searchsorted(np.cumsum(d2), r, side="right")), n - 1)
        centers[j] = x[idx]
        np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1), out=d2)
    return centers


def _lloyd(x: np.ndarray, centers: np.ndarray, cfg: KMeansConfig):
    """One Lloyd run; returns (centers, labels, inertia, inertia_history)."""
    n, k = x.shape[0], centers.shape[0]
    d2 = _pairwise_sq(x, centers)
    labels = d2.argmin(axis=1)
    prev = float(d2[np.arange(n), labels].sum())
    history = []
    for _ in range(cfg.max_iters):
        # revive empty clusters with the points farthest from their centers
        current = d2[np.arange(n), labels].copy()
        for _ in range(k):
            empty = np.flatnonzero(np.bincount(labels, minlength=k) == 0)
            if not empty.size:
                break
            far = int(current.argmax())
            labels[far] = empty[0]
            current[far] = -1.0

        sums = np.zeros((k, x.shape[1]))
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=k)
        centers = sums / counts[:, None]

        d2 = _pairwise_sq(x, centers)
        labels = d2.argmin(axis=1)
        inertia = float(d2[np.arange(n), labels].sum())
        assert inertia <= prev * (1 + 1e-12) + 1e-9, "inertia increased within a Lloyd run"
        history.append(inertia)
        if (prev - inertia) <= cfg.tol * max(prev, np.finfo(float).tiny):
            prev = inertia
            break
        prev = inertia
    return centers, labels, prev, history


def kmeans_fit(points, cfg: KMeansConfig, meta: dict | None = None) -> ClusterModel:
    """Fit k non-negative cluster centers, keeping the best of n_init restarts."""
    x = _coerce_points(points)
    if (x < 0).any():
        raise InputError("points must be non-negative")
    if x.shape[0] < cfg.k:
        raise InsufficientDataError(f"need at least k={cfg.k} points, got {x.shape[0]}")

    rng = np.random.default_rng(cfg.seed)
    best_centers, best_inertia = None, np.inf
    for _ in range(cfg.n_init):
        seeds = _kmeans_pp(x, cfg.k, rng)
        centers, _, inert, _ = _lloyd(x, seeds, cfg)
        if inert < best_inertia:
            best_centers, best_inertia = centers, inert
    return ClusterModel(DenseMatrix(best_centers.astype(np.float32)), dict(meta or {}))


def kmeans_assign(points, model: ClusterModel) -> LabelMask:
    """Label each point with its nearest center; ties go to the lowest index."""
    x = _coerce_points(points)
    if x.shape[1] != model.channels:
        raise DimensionError(f"points have {x.shape[1]} channels, model expects {model.channels}")
    d2 = _pairwise_sq(x, model.centers.data.astype(np.float64))
    return LabelMask(d2.argmin(axis=1).astype(np.uint32), model.k)


def inertia(points, model: ClusterModel) -> float:
    """Sum of squared distances from each point to its nearest center."""
    x = _coerce_points(points)
    if x.shape[1] != model.channels:
        raise DimensionError(f"points have {x.shape[1]} channels, model expects {model.channels}")
    d2 = _pairwise_sq(x, model.centers.data.astype(np.float64))
    return float(d2.min(axis=1).sum())


def save_cluster_model(model: ClusterModel, path) -> None:
    """Write ``<name>.fst`` (centers) and ``<name>.meta.json`` (string map)."""
    path = Path(path)
    write_fst(path, model.centers)
    meta = {str(k): str(v) for k, v in sorted(model.meta.items())}
    path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_cluster_model(path) -> ClusterModel:
    path = Path(path)
    centers = read_fst(path)
    if not isinstance(centers, DenseMatrix):
        raise FstFormatError(f"{path}: cluster model file must hold a 2-d matrix")
    meta_path = path.with_suffix(".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return ClusterModel(centers, meta)
