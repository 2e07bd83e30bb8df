"""Tile segmentation: feature tensor + cluster vocabulary -> label masks.

Two routes produce a mask whose labels are cluster indices:

* full-nmf: factorize the tile freely at a chosen rank, label each pixel
  with its strongest concept, then assign every concept feature to the
  cluster center with the highest cosine similarity.
* fixed-h: pin the concept matrix to the cluster centers and solve only
  for the per-pixel contributions, so the argmax is already in cluster
  space.

Masks live at the backbone grid resolution and can be upsampled to image
resolution either by nearest-neighbor on labels or by bilinearly
interpolating the contribution columns before the argmax.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .clustering import ClusterModel
from .errors import DimensionError, InputError, UnsupportedError
from .factorization import Factorization, NmfConfig, nmf_factorize, nmf_solve_w
from .tensor_io import DenseMatrix, FeatureTensor, LabelMask

log = logging.getLogger(__name__)


class SegmentationMode(enum.Enum):
    FULL_NMF_COSINE = "full-nmf"
    FIXED_H = "fixed-h"


class ResizeMode(enum.Enum):
    NEAREST_LABEL = "nearest"
    BILINEAR_W = "bilinear-w"


@dataclass(frozen=True)
class SegmentationRequest:
    mode: SegmentationMode
    k_concepts: int = 0
    resize_to: tuple[int, int] | None = None
    resize_mode: ResizeMode = ResizeMode.NEAREST_LABEL
    nmf_cfg: NmfConfig = NmfConfig()

    def __post_init__(self):
        if self.mode is SegmentationMode.FULL_NMF_COSINE and self.k_concepts < 1:
            raise InputError("full-nmf segmentation requires k_concepts >= 1")


@dataclass(eq=False)
class SegmentationResult:
    concept_mask: LabelMask
    cluster_mask: LabelMask
    factorization: Factorization
    concept_to_cluster: tuple[int, ...]
    resized_mask: LabelMask | None = None


def concept_labels(w, rows: int, cols: int) -> LabelMask:
    """Per-pixel argmax over contribution columns, reshaped to rows x cols.

    Ties (including all-zero rows) resolve to the lowest concept index.
    """
    mat = w.data if isinstance(w, DenseMatrix) else np.asarray(w)
    if mat.ndim != 2 or mat.shape[0] != rows * cols:
        raise DimensionError(f"w has shape {mat.shape}, expected ({rows * cols}, k)")
    labels = mat.argmax(axis=1).astype(np.uint32).reshape(rows, cols)
    return LabelMask(labels, mat.shape[1])


def match_concepts_to_clusters(h, model: ClusterModel) -> list[int]:
    """Cosine-nearest cluster index for every concept feature row.

    Cosine similarity is scale-free, so rescaling a concept or a center
    never changes the result.  Zero-norm concept rows cannot be matched;
    they map to cluster 0 with a warning.
    """
    mat = h.data if isinstance(h, DenseMatrix) else np.asarray(h)
    if mat.ndim != 2 or mat.shape[1] != model.channels:
        raise DimensionError(f"h has shape {mat.shape}, model expects {model.channels} channels")
    feats = mat.astype(np.float64)
    centers = model.centers.data.astype(np.float64)

    fnorm = np.linalg.norm(feats, axis=1)
    cnorm = np.linalg.norm(centers, axis=1)
    zero = fnorm == 0
    if zero.any():
        log.warning("zero_norm_concepts count=%d mapped_to=0", int(zero.sum()))
    safe = np.where(zero, 1.0, fnorm)
    cos = (feats @ centers.T) / (safe[:, None] * cnorm[None, :])
    out = cos.argmax(axis=1)
    out[zero] = 0
    return [int(i) for i in out]


def segment_tile(a: FeatureTensor, model: ClusterModel, req: SegmentationRequest) -> SegmentationResult:
    """Run one tile through the requested segmentation route."""
    if a.channels != model.channels:
        raise DimensionError(f"tensor has {a.channels} channels, model expects {model.channels}")

    if req.mode is SegmentationMode.FIXED_H:
        fac = nmf_solve_w(a.as_matrix(), model.centers, req.nmf_cfg)
        mapping = tuple(range(model.k))
        concept_mask = concept_labels(fac.w, a.rows, a.cols)
        cluster_mask = concept_mask
    else:
        fac = nmf_factorize(a.as_matrix(), req.k_concepts, req.nmf_cfg)
        mapping = tuple(match_concepts_to_clusters(fac.h, model))
        concept_mask = concept_labels(fac.w, a.rows, a.cols)
        cluster_labels = np.take(np.asarray(mapping, dtype=np.uint32), concept_mask.labels)
        cluster_mask = LabelMask(cluster_labels, model.k)

    result = SegmentationResult(
        concept_mask=concept_mask,
        cluster_mask=cluster_mask,
        factorization=fac,
        concept_to_cluster=mapping,
    )
    if req.resize_to is not None:
        result.resized_mask = resize_mask(result, req.resize_to, req.resize_mode)
    return result


def _nearest_indices(src: int, dst: int) -> np.ndarray:
    # half-pixel centers: output pixel i samples source floor((i+0.5)*src/dst)
    return np.minimum(((np.arange(dst) + 0.5) * (src / dst)).astype(np.int64), src - 1)


def _bilinear_grid(grid: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Bilinear upsample of (rows, cols, k) with half-pixel-center convention."""
    r, c = grid.shape[:2]
    ys = np.clip((np.arange(th) + 0.5) * (r / th) - 0.5, 0.0, r - 1.0)
    xs = np.clip((np.arange(tw) + 0.5) * (c / tw) - 0.5, 0.0, c - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, r - 1)
    x1 = np.minimum(x0 + 1, c - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = grid[np.ix_(y0, x0)] * (1 - wx) + grid[np.ix_(y0, x1)] * wx
    bot = grid[np.ix_(y1, x0)] * (1 - wx) + grid[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def resize_labels_nearest(mask: LabelMask, target: tuple[int, int]) -> LabelMask:
    """Nearest-neighbor upsampling of a label grid to ``target`` dims."""
    th, tw = target
    if th < mask.rows or tw < mask.cols:
        raise UnsupportedError(f"cannot downscale {mask.rows}x{mask.cols} mask to {th}x{tw}")
    if (th, tw) == (mask.rows, mask.cols):
        return mask
    ri = _nearest_indices(mask.rows, th)
    ci = _nearest_indices(mask.cols, tw)
    return LabelMask(mask.labels[ri[:, None], ci[None, :]], mask.n_labels)


def resize_mask(result: SegmentationResult, target: tuple[int, int], mode: ResizeMode) -> LabelMask:
    """Upsample the cluster mask to ``target`` (height, width) pixels."""
    th, tw = target
    grid = result.cluster_mask
    if th < grid.rows or tw < grid.cols:
        raise UnsupportedError(f"cannot downscale {grid.rows}x{grid.cols} mask to {th}x{tw}")

    if mode is ResizeMode.NEAREST_LABEL:
        return resize_labels_nearest(grid, target)

    w = result.factorization.w.data.astype(np.float64)
    stack = w.reshape(grid.rows, grid.cols, w.shape[1])
    concepts = _bilinear_grid(stack, th, tw).argmax(axis=2).astype(np.uint32)
    mapping = np.asarray(result.concept_to_cluster, dtype=np.uint32)
    return LabelMask(np.take(mapping, concepts), grid.n_labels)
