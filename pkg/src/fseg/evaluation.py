"""Scoring of unsupervised segmentations against ground-truth masks.

Two protocols:

* frequency matching -- count, per predicted cluster, how many pixels of
  each ground-truth category it covers, then map every cluster to a
  category: plain takes the row argmax, normalized first divides each
  count by the category's total pixel mass so rare categories can still
  claim clusters.  F1 is reported per category plus macro/micro.
* linear probing -- harvest concept features whose pixels co-occur with a
  single category above a threshold, train a multinomial logistic probe
  on those pairs, and relabel concepts with the probe's argmax.

Ground-truth pixels carrying the ignore label (== n_categories) are
excluded everywhere.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import CoverageError, DimensionError, InputError, InsufficientDataError
from .factorization import Factorization
from .tensor_io import DenseMatrix, LabelMask

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# frequency matching
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class FrequencyMatrix:
    """counts[c][g] = pixels predicted as cluster c with ground truth g."""

    counts: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.counts)
        if arr.ndim != 2:
            raise DimensionError(f"counts must be 2-d, got shape {arr.shape}")
        if arr.dtype.kind not in "iu":
            raise InputError(f"counts must be integers, got dtype {arr.dtype}")
        if (arr < 0).any():
            raise InputError("counts must be non-negative")
        self.counts = np.ascontiguousarray(arr, dtype=np.int64)

    @classmethod
    def zeros(cls, n_clusters: int, n_categories: int) -> "FrequencyMatrix":
        return cls(np.zeros((n_clusters, n_categories), dtype=np.int64))

    @property
    def n_clusters(self) -> int:
        return self.counts.shape[0]

    @property
    def n_categories(self) -> int:
        return self.counts.shape[1]


@dataclass(frozen=True)
class ClusterMapping:
    """Cluster index -> category index table plus the rule that made it."""

    map: tuple[int, ...]
    normalized: bool
    n_categories: int

    def __post_init__(self):
        if any(m < 0 or m >= self.n_categories for m in self.map):
            raise InputError("mapping entries must be valid category indices")


def accumulate_frequencies(pred: LabelMask, gt: LabelMask, acc: FrequencyMatrix) -> FrequencyMatrix:
    """Add one tile's (cluster, category) pixel counts into ``acc``.

    Accumulation is order-independent and additive, so tiles may be
    counted in any order or split across workers and summed.
    """
    if pred.labels.shape != gt.labels.shape:
        raise DimensionError(f"pred is {pred.labels.shape}, gt is {gt.labels.shape}")
    p = pred.labels.reshape(-1).astype(np.int64)
    g = gt.labels.reshape(-1).astype(np.int64)
    ncl, ncat = acc.n_clusters, acc.n_categories
    if p.size and int(p.max()) >= ncl:
        raise InputError(f"predicted label {int(p.max())} out of range for {ncl} clusters")
    if g.size and int(g.max()) > ncat:
        raise InputError(f"ground-truth label {int(g.max())} out of range for {ncat} categories (+ ignore)")
    keep = g < ncat  # gt == n_categories is the ignore label
    if keep.any():
        flat = np.bincount(p[keep] * ncat + g[keep], minlength=ncl * ncat)
        acc.counts += flat.reshape(ncl, ncat)
    return acc


def match_clusters(freq: FrequencyMatrix, normalized: bool) -> ClusterMapping:
    """Associate every cluster with one category.

    plain: row argmax of raw counts.  normalized: counts are divided by
    each category's total pixel count first (categories with no pixels
    are excluded), which lets rare categories win clusters they dominate
    relatively.  Ties resolve to the lowest category index; all-zero
    cluster rows fall back to category 0 with a warning.
    """
    counts = freq.counts
    if not counts.any():
        raise InputError("frequency matrix is all-zero")
    if normalized:
        totals = counts.sum(axis=0).astype(np.float64)
        scores = np.full(counts.shape, -1.0)
        present = totals > 0
        scores[:, present] = counts[:, present] / totals[present]
    else:
        scores = counts
    mapping = scores.argmax(axis=1)
    zero_rows = np.flatnonzero(counts.sum(axis=1) == 0)
    if zero_rows.size:
        log.warning("empty_cluster_rows count=%d mapped_to=0", int(zero_rows.size))
        mapping[zero_rows] = 0
    return ClusterMapping(tuple(int(m) for m in mapping), normalized, freq.n_categories)


def apply_mapping(pred: LabelMask, mapping: ClusterMapping) -> LabelMask:
    """Relabel a cluster mask into category space through the mapping."""
    if pred.labels.size and int(pred.labels.max()) >= len(mapping.map):
        raise InputError(f"predicted label {int(pred.labels.max())} out of range for mapping of {len(mapping.map)}")
    table = np.asarray(mapping.map, dtype=np.uint32)
    return LabelMask(np.take(table, pred.labels), mapping.n_categories)


# ---------------------------------------------------------------------------
# F1 reporting
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class F1Report:
    per_class_f1: np.ndarray
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    pixel_counts: np.ndarray
    macro_f1: float
    micro_f1: float


def confusion_matrix(pred: LabelMask, gt: LabelMask, n_categories: int) -> np.ndarray:
    """(pred category, gt category) pixel counts; ignore-gt pixels skipped."""
    if pred.labels.shape != gt.labels.shape:
        raise DimensionError(f"pred is {pred.labels.shape}, gt is {gt.labels.shape}")
    p = pred.labels.reshape(-1).astype(np.int64)
    g = gt.labels.reshape(-1).astype(np.int64)
    if p.size and int(p.max()) >= n_categories:
        raise InputError(f"predicted label {int(p.max())} out of range for {n_categories} categories")
    if g.size and int(g.max()) > n_categories:
        raise InputError(f"ground-truth label {int(g.max())} out of range for {n_categories} categories (+ ignore)")
    keep = g < n_categories
    flat = np.bincount(p[keep] * n_categories + g[keep], minlength=n_categories * n_categories)
    return flat.reshape(n_categories, n_categories)


def f1_from_confusion(conf: np.ndarray) -> F1Report:
    """Per-class P/R/F1 from a (pred, gt) confusion matrix.

    F1 is undefined (NaN) for classes absent from both sides; the macro
    mean runs over classes present in the ground truth only.  Micro F1
    aggregates pixels, which for single-label pixels equals accuracy.
    """
    conf = np.asarray(conf, dtype=np.int64)
    tp = np.diag(conf).astype(np.float64)
    pred_tot = conf.sum(axis=1).astype(np.float64)
    gt_tot = conf.sum(axis=0).astype(np.float64)
    fp = pred_tot - tp
    fn = gt_tot - tp

    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pred_tot > 0, tp / pred_tot, np.nan)
        recall = np.where(gt_tot > 0, tp / gt_tot, np.nan)
        denom = 2 * tp + fp + fn
        f1 = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1.0), np.nan)

    in_gt = gt_tot > 0
    macro = float(f1[in_gt].mean()) if in_gt.any() else float("nan")
    total = float(gt_tot.sum())
    micro = float(tp.sum() / total) if total > 0 else float("nan")
    return F1Report(
        per_class_f1=f1,
        per_class_precision=precision,
        per_class_recall=recall,
        pixel_counts=gt_tot.astype(np.int64),
        macro_f1=macro,
        micro_f1=micro,
    )


def f1_report(pred_categories: LabelMask, gt: LabelMask, n_categories: int) -> F1Report:
    """Pixel-level F1 of a category-space prediction against ground truth."""
    return f1_from_confusion(confusion_matrix(pred_categories, gt, n_categories))


def f1_from_frequency(freq: FrequencyMatrix, mapping: ClusterMapping) -> F1Report:
    """F1 computed by collapsing frequency-matrix rows through the mapping.

    Equivalent to relabeling every pixel and recounting, without a second
    pass over the masks.
    """
    ncat = mapping.n_categories
    conf = np.zeros((ncat, ncat), dtype=np.int64)
    np.add.at(conf, np.asarray(mapping.map, dtype=np.int64), freq.counts)
    return f1_from_confusion(conf)


def report_to_flat_dict(report: F1Report) -> dict:
    """Flat JSON-ready view; undefined metrics become null."""
    def cell(x):
        return None if np.isnan(x) else float(x)

    out = {
        "macro_f1": cell(report.macro_f1),
        "micro_f1": cell(report.micro_f1),
        "n_categories": int(report.per_class_f1.size),
    }
    for i in range(report.per_class_f1.size):
        out[f"class_{i}_precision"] = cell(report.per_class_precision[i])
        out[f"class_{i}_recall"] = cell(report.per_class_recall[i])
        out[f"class_{i}_f1"] = cell(report.per_class_f1[i])
        out[f"class_{i}_pixels"] = int(report.pixel_counts[i])
    return out


def report_to_csv(report: F1Report) -> str:
    """CSV with one row per category plus a final macro row."""
    buf = io.StringIO()
    buf.write("category,pixels,precision,recall,f1\n")

    def cell(x):
        return "" if np.isnan(x) else f"{x:.6f}"

    for i in range(report.per_class_f1.size):
        buf.write(
            f"{i},{int(report.pixel_counts[i])},{cell(report.per_class_precision[i])},"
            f"{cell(report.per_class_recall[i])},{cell(report.per_class_f1[i])}\n"
        )
    buf.write(f"macro,{int(report.pixel_counts.sum())},,,{cell(report.macro_f1)}\n")
    return buf.getvalue()


def frequency_to_csv(freq: FrequencyMatrix) -> str:
    buf = io.StringIO()
    buf.write("cluster," + ",".join(f"category_{g}" for g in range(freq.n_categories)) + "\n")
    for c in range(freq.n_clusters):
        buf.write(f"{c}," + ",".join(str(int(v)) for v in freq.counts[c]) + "\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# linear probing
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ProbeSet:
    """Accumulated (concept feature, category) training pairs."""

    threshold: float
    features: list = field(default_factory=list)
    labels: list = field(default_factory=list)

    def __post_init__(self):
        if not 0 < self.threshold <= 1:
            raise InputError(f"threshold must be in (0, 1], got {self.threshold}")

    def __len__(self) -> int:
        return len(self.labels)

    def feature_matrix(self) -> np.ndarray:
        return np.stack(self.features).astype(np.float64)


@dataclass(eq=False)
class LinearProbe:
    """Multinomial linear classifier over concept features."""

    weights: np.ndarray  # n_categories x channels
    bias: np.ndarray  # n_categories

    def __post_init__(self):
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise InputError("probe parameters must be finite")


def probe_collect(
    factorization: Factorization,
    concept_mask: LabelMask,
    gt: LabelMask,
    threshold: float,
    acc: ProbeSet,
    n_categories: int,
) -> ProbeSet:
    """Harvest (concept feature, category) pairs from one tile.

    A concept contributes iff the largest fraction of its non-ignored
    pixels lying in a single category reaches ``threshold``; the pair
    records the concept's feature row and that category.
    """
    if concept_mask.labels.shape != gt.labels.shape:
        raise DimensionError(f"concept mask is {concept_mask.labels.shape}, gt is {gt.labels.shape}")
    if not 0 < threshold <= 1:
        raise InputError(f"threshold must be in (0, 1], got {threshold}")
    h = factorization.h.data
    cm = concept_mask.labels.reshape(-1)
    g = gt.labels.reshape(-1).astype(np.int64)
    valid = g < n_categories
    for m in np.unique(cm):
        sel = valid & (cm == m)
        n_sel = int(sel.sum())
        if n_sel == 0:
            continue
        fractions = np.bincount(g[sel], minlength=n_categories) / n_sel
        best = int(fractions.argmax())
        if fractions[best] >= threshold:
            acc.features.append(np.array(h[int(m)], dtype=np.float32))
            acc.labels.append(best)
    return acc


def probe_loss_and_grad(
    weights: np.ndarray,
    bias: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    reg: float,
    use_bias: bool = True,
):
    """Mean cross-entropy + reg*||W||^2 and its gradient in (W, b).

    Exposed so the analytic gradient can be checked against finite
    differences.
    """
    n = features.shape[0]
    scores = features @ weights.T
    if use_bias:
        scores = scores + bias[None, :]
    scores -= scores.max(axis=1, keepdims=True)
    exp = np.exp(scores)
    probs = exp / exp.sum(axis=1, keepdims=True)
    logp = scores - np.log(exp.sum(axis=1, keepdims=True))
    loss = -float(logp[np.arange(n), labels].mean()) + reg * float((weights * weights).sum())

    delta = probs
    delta[np.arange(n), labels] -= 1.0
    grad_w = (delta.T @ features) / n + 2.0 * reg * weights
    grad_b = delta.sum(axis=0) / n if use_bias else np.zeros_like(bias)
    return loss, grad_w, grad_b


def probe_train(
    probe_set: ProbeSet,
    n_categories: int,
    reg: float = 1e-3,
    seed: int = 17,
    use_bias: bool = True,
    max_iters: int = 5000,
    grad_tol: float = 1e-5,
) -> LinearProbe:
    """Fit the probe by full-batch gradient descent with backtracking.

    Runs until every gradient component is below ``grad_tol`` in absolute
    value or the iteration cap is hit; deterministic for a fixed seed.
    """
    if len(probe_set) == 0:
        raise InsufficientDataError("probe set is empty; no concept passed the threshold")
    labels = np.asarray(probe_set.labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_categories)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise CoverageError(
            f"categories {missing.tolist()} have no probe examples (counts={counts.tolist()})",
            missing=missing.tolist(),
            counts=counts.tolist(),
        )

    x = probe_set.feature_matrix()
    rng = np.random.default_rng(seed)
    w = 0.01 * rng.standard_normal((n_categories, x.shape[1]))
    b = np.zeros(n_categories)

    loss, gw, gb = probe_loss_and_grad(w, b, x, labels, reg, use_bias)
    step = 1.0
    for _ in range(max_iters):
        gmax = max(float(np.abs(gw).max()), float(np.abs(gb).max()))
        if gmax < grad_tol:
            break
        gnorm2 = float((gw * gw).sum() + (gb * gb).sum())
        # Armijo backtracking on the descent direction -grad
        t = step
        while True:
            w_new = w - t * gw
            b_new = b - t * gb if use_bias else b
            loss_new, gw_new, gb_new = probe_loss_and_grad(w_new, b_new, x, labels, reg, use_bias)
            if loss_new <= loss - 0.5 * t * gnorm2 or t < 1e-16:
                break
            t *= 0.5
        w, b, loss, gw, gb = w_new, b_new, loss_new, gw_new, gb_new
        step = min(t * 2.0, 1e6)
    return LinearProbe(weights=w, bias=b)


def probe_classify(h, probe: LinearProbe) -> list[int]:
    """Argmax category per concept row; ties go to the lowest category."""
    mat = h.data if isinstance(h, DenseMatrix) else np.asarray(h)
    if mat.ndim != 2 or mat.shape[1] != probe.weights.shape[1]:
        raise DimensionError(f"h has shape {mat.shape}, probe expects {probe.weights.shape[1]} channels")
    scores = mat.astype(np.float64) @ probe.weights.T + probe.bias[None, :]
    return [int(i) for i in scores.argmax(axis=1)]
