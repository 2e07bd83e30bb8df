"""Non-negative matrix factorization via multiplicative updates.

Factorizes a flattened activation matrix A of shape (rows*cols) x channels
as A ~ W*H with W, H >= 0, minimizing the Frobenius reconstruction error
||A - WH||_F.  Two entry points:

* :func:`nmf_factorize` -- free factorization, alternating updates of W
  and H at a chosen rank.
* :func:`nmf_solve_w` -- H is pinned (typically to cluster centers) and
  only W is optimized; the objective then decomposes into independent
  non-negative least-squares problems, one per pixel row.

Both use the classic multiplicative rules

    W <- W * (A Ht) / (W H Ht + eps)
    H <- H * (Wt A) / (Wt W H + eps)

which preserve non-negativity and never increase the objective.  A sweep
applies each rule ``inner_updates`` times while the other factor is held
fixed; the products A Ht, H Ht (resp. Wt A, Wt W) only depend on the held
factor, so the repeats cost two small matrix products each and sharply
speed up convergence over one-update sweeps.  Per-sweep objective values
are recorded in ``Factorization.error_history`` so monotone descent can
be checked from the outside.

Factors are computed in float64 and stored as float32 matrices; results
are bit-reproducible for a fixed config seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCenterError, DimensionError, InputError
from .tensor_io import DenseMatrix, FeatureTensor


@dataclass(frozen=True)
class NmfConfig:
    """Solver hyperparameters shared by both factorization variants."""

    max_iters: int = 200
    tol: float = 1e-4
    seed: int = 17
    epsilon: float = 1e-9
    inner_updates: int = 12

    def __post_init__(self):
        if self.max_iters < 1:
            raise InputError(f"max_iters must be positive, got {self.max_iters}")
        if self.tol < 0:
            raise InputError(f"tol must be non-negative, got {self.tol}")
        if self.epsilon <= 0:
            raise InputError(f"epsilon must be positive, got {self.epsilon}")
        if self.inner_updates < 1:
            raise InputError(f"inner_updates must be positive, got {self.inner_updates}")


@dataclass(frozen=True, eq=False)
class Factorization:
    """Result of a factorization: A ~ w @ h, both factors non-negative."""

    w: DenseMatrix
    h: DenseMatrix
    k_c: int
    final_error: float
    n_iters: int
    error_history: tuple[float, ...] = ()


def _as_matrix(a, require_nonneg: bool = True) -> np.ndarray:
    """Coerce tensor/matrix inputs to a float64 2-d array, validating values."""
    if isinstance(a, FeatureTensor):
        arr = a.as_matrix()
    elif isinstance(a, DenseMatrix):
        arr = a.data
    else:
        arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise InputError("input contains NaN or Inf")
    if require_nonneg and (arr < 0).any():
        raise InputError("input contains negative values")
    return arr.astype(np.float64, copy=False)


def _init_factor(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    # |N(0,1)| scaled by mean(A)/k: cheap, non-negative, matches the data scale.
    return np.abs(rng.standard_normal(shape)) * scale


def _frobenius(a: np.ndarray, w: np.ndarray, h: np.ndarray) -> float:
    return float(np.linalg.norm(a - w @ h))


def nmf_factorize(a, k_c: int, cfg: NmfConfig = NmfConfig()) -> Factorization:
    """Factorize a non-negative matrix into rank-``k_c`` factors W, H.

    Stops when the relative objective change between sweeps drops below
    ``cfg.tol`` or after ``cfg.max_iters`` sweeps.
    """
    mat = _as_matrix(a)
    n, channels = mat.shape
    if k_c < 1:
        raise InputError(f"k_c must be positive, got {k_c}")
    if k_c > min(n, channels):
        raise DimensionError(f"k_c={k_c} exceeds min(rows*cols, channels)={min(n, channels)}")

    rng = np.random.default_rng(cfg.seed)
    scale = float(mat.mean()) / k_c
    w = _init_factor(rng, (n, k_c), scale)
    h = _init_factor(rng, (k_c, channels), scale)

    eps = cfg.epsilon
    history = []
    prev = None
    for _ in range(cfg.max_iters):
        aht = mat @ h.T  # constant while h is held fixed
        hht = h @ h.T
        for _ in range(cfg.inner_updates):
            w *= aht / (w @ hht + eps)
        wta = w.T @ mat
        wtw = w.T @ w
        for _ in range(cfg.inner_updates):
            h *= wta / (wtw @ h + eps)
        err = _frobenius(mat, w, h)
        history.append(err)
        if prev is not None and abs(prev - err) / max(prev, np.finfo(float).tiny) < cfg.tol:
            break
        prev = err

    return Factorization(
        w=DenseMatrix(w.astype(np.float32)),
        h=DenseMatrix(h.astype(np.float32)),
        k_c=k_c,
        final_error=history[-1],
        n_iters=len(history),
        error_history=tuple(history),
    )


def nmf_solve_w(a, h_fixed, cfg: NmfConfig = NmfConfig()) -> Factorization:
    """Solve ``min_W ||A - W @ h_fixed||_F`` with W >= 0, H held fixed.

    The returned factorization carries ``h_fixed`` through untouched.
    Every row of ``h_fixed`` must have positive norm, otherwise its
    multiplicative update is undefined.
    """
    mat = _as_matrix(a)
    h_dm = h_fixed if isinstance(h_fixed, DenseMatrix) else DenseMatrix(np.asarray(h_fixed, dtype=np.float32))
    h = h_dm.data.astype(np.float64)
    if (h < 0).any():
        raise InputError("h_fixed contains negative values")
    if h.shape[1] != mat.shape[1]:
        raise DimensionError(f"h_fixed has {h.shape[1]} channels, input has {mat.shape[1]}")
    zero_rows = np.flatnonzero((h * h).sum(axis=1) == 0)
    if zero_rows.size:
        raise DegenerateCenterError(f"h_fixed rows {zero_rows.tolist()} are all-zero; filter degenerate centers first")

    k = h.shape[0]
    rng = np.random.default_rng(cfg.seed)
    scale = float(mat.mean()) / k
    w = _init_factor(rng, (mat.shape[0], k), scale)

    # H never changes, so the update's constant pieces are hoisted.
    aht = mat @ h.T
    hht = h @ h.T
    eps = cfg.epsilon
    history = []
    prev = None
    for _ in range(cfg.max_iters):
        for _ in range(cfg.inner_updates):
            w *= aht / (w @ hht + eps)
        err = _frobenius(mat, w, h)
        history.append(err)
        if prev is not None and abs(prev - err) / max(prev, np.finfo(float).tiny) < cfg.tol:
            break
        prev = err

    return Factorization(
        w=DenseMatrix(w.astype(np.float32)),
        h=h_dm,
        k_c=k,
        final_error=history[-1],
        n_iters=len(history),
        error_history=tuple(history),
    )


def reconstruction_error(a, w, h) -> float:
    """Frobenius norm of the residual A - W @ H."""
    mat = _as_matrix(a, require_nonneg=False)
    wm = _as_matrix(w, require_nonneg=False)
    hm = _as_matrix(h, require_nonneg=False)
    if wm.shape[0] != mat.shape[0] or hm.shape[1] != mat.shape[1] or wm.shape[1] != hm.shape[0]:
        raise DimensionError(
            f"shapes do not conform: a {mat.shape}, w {wm.shape}, h {hm.shape}"
        )
    return _frobenius(mat, wm, hm)
