"""Command-line front-end for the segmentation pipeline.

Subcommands: cluster-fit, segment, eval-match, eval-probe, info.
Every file-producing run writes a manifest recording the resolved
arguments, so a run can be replayed and checked for bit-identical
outputs.  Logs go to stderr as ``level key=value ...`` lines; reports go
to files only.  Exit code is 0 iff no per-item failure occurred.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import KMeansConfig, gap_pool, kmeans_fit, load_cluster_model, save_cluster_model
from .errors import DimensionError, FsegError, InputError, InsufficientDataError
from .evaluation import (
    FrequencyMatrix,
    accumulate_frequencies,
    confusion_matrix,
    f1_from_confusion,
    f1_from_frequency,
    frequency_to_csv,
    match_clusters,
    probe_classify,
    probe_collect,
    probe_train,
    ProbeSet,
    report_to_csv,
    report_to_flat_dict,
)
from .factorization import NmfConfig, nmf_factorize, nmf_solve_w
from .segmentation import (
    SegmentationMode,
    SegmentationRequest,
    ResizeMode,
    concept_labels,
    resize_labels_nearest,
    segment_tile,
)
from .tensor_io import (
    DenseMatrix,
    FeatureTensor,
    LabelMask,
    load_palette,
    read_fst,
    read_fst_header,
    read_gt_mask,
    write_fst,
    write_mask_pgm,
)

log = logging.getLogger("fseg.cli")

_IMAGE_SUFFIXES = {".png", ".pgm", ".bmp", ".gif", ".tif", ".tiff", ".jpg", ".jpeg"}


class _KvFormatter(logging.Formatter):
    def format(self, record):
        return f"{record.levelname.lower()} {record.getMessage()}"


def _setup_logging():
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_KvFormatter())
    pkg = logging.getLogger("fseg")
    pkg.handlers[:] = [handler]
    pkg.setLevel(logging.INFO)


def _kv(**kv) -> str:
    return " ".join(f"{k}={v}" for k, v in kv.items())


def _write_manifest(path, command, argv, args, inputs, outputs, started, failures):
    params = {k: v for k, v in sorted(vars(args).items()) if k != "command"}
    doc = {
        "command": command,
        "argv": list(argv),
        "parameters": params,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "duration_seconds": round(time.monotonic() - started, 6),
        "failures": failures,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _run_batch(fn, items, jobs):
    """Apply fn to each item, collecting per-item failures instead of dying."""

    def wrap(item):
        try:
            return item, fn(item), None
        except Exception as exc:  # per-item isolation; reported at the end
            return item, None, exc

    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(wrap, items))
    else:
        rows = [wrap(i) for i in items]

    results, failures = {}, {}
    for item, res, exc in rows:
        if exc is None:
            results[item] = res
        else:
            failures[item] = exc
            log.error("%s", _kv(item=item, error=type(exc).__name__, detail=str(exc).replace("\n", " ")))
    return results, failures


def _json_dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _paired_stems(left: dict, right: dict, left_name: str, right_name: str):
    unpaired = sorted(set(left) ^ set(right))
    if unpaired:
        raise InputError(
            f"unpaired files between {left_name} and {right_name}: {', '.join(unpaired)}"
        )
    return sorted(left)


def _gt_files(gt_dir) -> dict:
    files = {}
    for p in sorted(Path(gt_dir).iterdir()):
        if p.suffix.lower() in _IMAGE_SUFFIXES:
            files[p.stem] = p
    if not files:
        raise InsufficientDataError(f"no ground-truth mask images in {gt_dir}")
    return files


def _fst_files(a_dir, what: str) -> dict:
    files = {p.stem: p for p in sorted(Path(a_dir).glob("*.fst"))}
    if not files:
        raise InsufficientDataError(f"no {what} .fst files in {a_dir}")
    return files


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_cluster_fit(args, argv) -> int:
    started = time.monotonic()
    files = sorted(Path(args.features_dir).glob("*.fst"))
    if not files:
        raise InsufficientDataError(f"no .fst files in {args.features_dir}")

    vectors = []
    channels = None
    for f in files:
        obj = read_fst(f)
        if isinstance(obj, FeatureTensor):
            vec = gap_pool(obj)  # 3-d tensors are pooled on the fly
        elif isinstance(obj, DenseMatrix) and obj.n_rows == 1:
            vec = obj.data[0]
        else:
            raise InputError(f"{f}: expected a 3-d feature tensor or 1-d pooled vector")
        if channels is None:
            channels = vec.size
        elif vec.size != channels:
            raise DimensionError(f"{f}: channel dim {vec.size} differs from {channels}")
        vectors.append(vec)

    cfg = KMeansConfig(k=args.k, seed=args.seed, max_iters=args.max_iters, tol=args.tol, n_init=args.n_init)
    meta = {
        "tool": f"fseg {__version__}",
        "k": str(args.k),
        "seed": str(args.seed),
        "channels": str(channels),
        "n_vectors": str(len(vectors)),
        "source": str(args.features_dir),
    }
    log.info("%s", _kv(cmd="cluster-fit", vectors=len(vectors), channels=channels, k=args.k))
    model = kmeans_fit(np.stack(vectors).astype(np.float64), cfg, meta=meta)

    out = Path(args.out)
    if out.suffix != ".fst":
        out = out.with_suffix(".fst")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_cluster_model(model, out)
    _write_manifest(
        out.with_suffix(".manifest.json"), "cluster-fit", argv, args,
        inputs=files, outputs=[out, out.with_suffix(".meta.json")],
        started=started, failures=0,
    )
    return 0


def _parse_resize(parser, text):
    if text is None:
        return None
    try:
        h, w = text.lower().split("x")
        return (int(h), int(w))
    except ValueError:
        parser.error(f"--resize expects HxW, got {text!r}")


def cmd_segment(args, argv, resize_to) -> int:
    started = time.monotonic()
    model = load_cluster_model(args.model)
    src = Path(args.input)
    files = [src] if src.is_file() else sorted(src.glob("*.fst"))
    if not files:
        raise InsufficientDataError(f"no .fst tiles in {args.input}")

    req = SegmentationRequest(
        mode=SegmentationMode(args.mode),
        k_concepts=args.k_concepts or 0,
        resize_to=resize_to,
        resize_mode=ResizeMode(args.resize_mode),
        nmf_cfg=NmfConfig(max_iters=args.max_iters, tol=args.tol, seed=args.seed),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def work(f: Path):
        obj = read_fst(f)
        if not isinstance(obj, FeatureTensor):
            raise InputError(f"{f}: expected a 3-d feature tensor")
        res = segment_tile(obj, model, req)
        mask = res.resized_mask if res.resized_mask is not None else res.cluster_mask
        write_fst(out / f"{f.stem}.fst", mask)
        write_mask_pgm(out / f"{f.stem}.pgm", mask, scale=True)
        _json_dump(out / f"{f.stem}.json", {
            "final_error": res.factorization.final_error,
            "n_iters": res.factorization.n_iters,
            "concept_to_cluster": list(res.concept_to_cluster),
        })
        return [f"{f.stem}.fst", f"{f.stem}.pgm", f"{f.stem}.json"]

    results, failures = _run_batch(work, files, args.jobs)
    outputs = [name for stem in sorted(results, key=str) for name in results[stem]]
    _write_manifest(out / "manifest.json", "segment", argv, args,
                    inputs=files, outputs=outputs, started=started, failures=len(failures))
    log.info("%s", _kv(cmd="segment", tiles=len(files), failed=len(failures)))
    return 1 if failures else 0


def cmd_eval_match(args, argv) -> int:
    started = time.monotonic()
    palette = load_palette(args.palette)
    preds = _fst_files(args.pred_dir, "predicted mask")
    gts = _gt_files(args.gt_dir)
    stems = _paired_stems(preds, gts, args.pred_dir, args.gt_dir)

    first = read_fst(preds[stems[0]])
    if not isinstance(first, LabelMask):
        raise InputError(f"{preds[stems[0]]}: expected a label mask")
    n_clusters = first.n_labels
    ncat = palette.n_categories

    def work(stem):
        pred = read_fst(preds[stem])
        if not isinstance(pred, LabelMask):
            raise InputError(f"{preds[stem]}: expected a label mask")
        if pred.n_labels != n_clusters:
            raise InputError(f"{preds[stem]}: n_labels {pred.n_labels} differs from {n_clusters}")
        gt = read_gt_mask(gts[stem], palette)
        if (pred.rows, pred.cols) != (gt.rows, gt.cols):
            pred = resize_labels_nearest(pred, (gt.rows, gt.cols))
        local = FrequencyMatrix.zeros(n_clusters, ncat)
        return accumulate_frequencies(pred, gt, local)

    results, failures = _run_batch(work, stems, args.jobs)
    if not results:
        raise InsufficientDataError("every prediction/ground-truth pair failed")

    acc = FrequencyMatrix.zeros(n_clusters, ncat)
    for stem in sorted(results):  # deterministic merge order
        acc.counts += results[stem].counts

    mapping = match_clusters(acc, args.normalized)
    report = f1_from_frequency(acc, mapping)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "frequency.csv").write_text(frequency_to_csv(acc))
    _json_dump(out / "mapping.json", {
        "map": list(mapping.map),
        "normalized": mapping.normalized,
        "n_categories": mapping.n_categories,
    })
    (out / "report.csv").write_text(report_to_csv(report))
    _json_dump(out / "report.json", report_to_flat_dict(report))
    _write_manifest(out / "manifest.json", "eval-match", argv, args,
                    inputs=[preds[s] for s in stems] + [gts[s] for s in stems],
                    outputs=["frequency.csv", "mapping.json", "report.csv", "report.json"],
                    started=started, failures=len(failures))
    log.info("%s", _kv(cmd="eval-match", pairs=len(stems), failed=len(failures),
                       macro_f1=f"{report.macro_f1:.6f}"))
    return 1 if failures else 0


def cmd_eval_probe(args, argv) -> int:
    started = time.monotonic()
    palette = load_palette(args.palette)
    mode = SegmentationMode(args.mode)
    model = load_cluster_model(args.model) if mode is SegmentationMode.FIXED_H else None
    feats = _fst_files(args.features_dir, "feature tensor")
    gts = _gt_files(args.gt_dir)
    stems = _paired_stems(feats, gts, args.features_dir, args.gt_dir)
    ncat = palette.n_categories
    cfg = NmfConfig(max_iters=args.max_iters, tol=args.tol, seed=args.seed)

    def work(stem):
        tensor = read_fst(feats[stem])
        if not isinstance(tensor, FeatureTensor):
            raise InputError(f"{feats[stem]}: expected a 3-d feature tensor")
        gt = read_gt_mask(gts[stem], palette)
        if mode is SegmentationMode.FIXED_H:
            fac = nmf_solve_w(tensor.as_matrix(), model.centers, cfg)
        else:
            fac = nmf_factorize(tensor.as_matrix(), args.k_concepts, cfg)
        cm = concept_labels(fac.w, tensor.rows, tensor.cols)
        cm = resize_labels_nearest(cm, (gt.rows, gt.cols))
        return fac, cm, gt

    results, failures = _run_batch(work, stems, args.jobs)
    if not results:
        raise InsufficientDataError("every feature/ground-truth pair failed")

    probe_set = ProbeSet(threshold=args.threshold)
    for stem in sorted(results):
        fac, cm, gt = results[stem]
        probe_collect(fac, cm, gt, args.threshold, probe_set, ncat)
    log.info("%s", _kv(cmd="eval-probe", tiles=len(results), probe_pairs=len(probe_set)))

    probe = probe_train(probe_set, ncat, reg=args.reg, seed=args.seed, use_bias=not args.no_bias)

    conf = np.zeros((ncat, ncat), dtype=np.int64)
    for stem in sorted(results):
        fac, cm, gt = results[stem]
        cats = np.asarray(probe_classify(fac.h, probe), dtype=np.uint32)
        pred = LabelMask(np.take(cats, cm.labels), ncat)
        conf += confusion_matrix(pred, gt, ncat)
    report = f1_from_confusion(conf)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_to_csv(report))
    _json_dump(out / "report.json", report_to_flat_dict(report))
    write_fst(out / "probe_weights.fst", DenseMatrix(probe.weights.astype(np.float32)))
    write_fst(out / "probe_bias.fst", DenseMatrix(probe.bias.astype(np.float32)))
    counts = np.bincount(np.asarray(probe_set.labels, dtype=np.int64), minlength=ncat)
    _json_dump(out / "probe.json", {
        "threshold": args.threshold,
        "n_examples": len(probe_set),
        "per_category_examples": counts.tolist(),
        "mode": args.mode,
        "use_bias": not args.no_bias,
        "reg": args.reg,
    })
    _write_manifest(out / "manifest.json", "eval-probe", argv, args,
                    inputs=[feats[s] for s in stems] + [gts[s] for s in stems],
                    outputs=["report.csv", "report.json", "probe_weights.fst", "probe_bias.fst", "probe.json"],
                    started=started, failures=len(failures))
    log.info("%s", _kv(cmd="eval-probe", macro_f1=f"{report.macro_f1:.6f}", failed=len(failures)))
    return 1 if failures else 0


def cmd_info(args) -> int:
    code = 0
    for path in args.paths:
        try:
            info = read_fst_header(path)
        except (FsegError, OSError) as exc:
            log.error("%s", _kv(path=path, error=type(exc).__name__, detail=str(exc).replace("\n", " ")))
            code = 1
            continue
        dims = "x".join(str(d) for d in info["dims"])
        extra = f" n_labels={info['n_labels']}" if "n_labels" in info else ""
        print(f"{path}: v{info['version']} {info['dtype']} dims={dims}{extra} bytes={info['bytes']}")
    return code


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fseg", description="Factorization-based unsupervised segmentation toolkit")
    p.add_argument("--version", action="version", version=f"fseg {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=17, help="seed for all randomized steps")
        sp.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="parallel tile workers")

    cf = sub.add_parser("cluster-fit", help="train a k-means concept vocabulary from pooled features")
    cf.add_argument("features_dir", help="directory of 1-d pooled or 3-d tensor .fst files")
    cf.add_argument("--k", type=int, required=True)
    cf.add_argument("--out", required=True, help="model path base; writes <out>.fst and <out>.meta.json")
    cf.add_argument("--n-init", type=int, default=4)
    cf.add_argument("--max-iters", type=int, default=300)
    cf.add_argument("--tol", type=float, default=1e-4)
    common(cf)

    sg = sub.add_parser("segment", help="segment feature tensors against a cluster model")
    sg.add_argument("input", help="one .fst tensor or a directory of them")
    sg.add_argument("--model", required=True)
    sg.add_argument("--mode", choices=[m.value for m in SegmentationMode], required=True)
    sg.add_argument("--k-concepts", type=int, help="factorization rank (full-nmf mode only)")
    sg.add_argument("--resize", metavar="HxW", help="upsample masks to this pixel size")
    sg.add_argument("--resize-mode", choices=[m.value for m in ResizeMode], default="nearest")
    sg.add_argument("--out", required=True)
    sg.add_argument("--max-iters", type=int, default=200)
    sg.add_argument("--tol", type=float, default=1e-4)
    common(sg)

    em = sub.add_parser("eval-match", help="frequency-matching evaluation of predicted masks")
    em.add_argument("pred_dir")
    em.add_argument("gt_dir")
    em.add_argument("--palette", required=True)
    em.add_argument("--normalized", action="store_true", help="normalize counts by category totals")
    em.add_argument("--out", required=True)
    common(em)

    ep = sub.add_parser("eval-probe", help="linear-probing evaluation over factorized concepts")
    ep.add_argument("features_dir")
    ep.add_argument("gt_dir")
    ep.add_argument("--palette", required=True)
    ep.add_argument("--mode", choices=[m.value for m in SegmentationMode], required=True)
    ep.add_argument("--model", help="cluster model (fixed-h mode)")
    ep.add_argument("--k-concepts", type=int, help="factorization rank (full-nmf mode)")
    ep.add_argument("--threshold", type=float, default=0.75)
    ep.add_argument("--reg", type=float, default=1e-3)
    ep.add_argument("--no-bias", action="store_true", help="train the probe without a bias term")
    ep.add_argument("--out", required=True)
    ep.add_argument("--max-iters", type=int, default=200)
    ep.add_argument("--tol", type=float, default=1e-4)
    common(ep)

    inf = sub.add_parser("info", help="print FST file headers")
    inf.add_argument("paths", nargs="+")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging()

    resize_to = None
    if args.command in ("segment", "eval-probe") and args.mode == "full-nmf" and not args.k_concepts:
        parser.error("--k-concepts is required with --mode full-nmf")
    if args.command == "eval-probe" and args.mode == "fixed-h" and not args.model:
        parser.error("--model is required with --mode fixed-h")
    if args.command == "segment":
        resize_to = _parse_resize(parser, args.resize)

    try:
        if args.command == "cluster-fit":
            return cmd_cluster_fit(args, argv)
        if args.command == "segment":
            return cmd_segment(args, argv, resize_to)
        if args.command == "eval-match":
            return cmd_eval_match(args, argv)
        if args.command == "eval-probe":
            return cmd_eval_probe(args, argv)
        return cmd_info(args)
    except (FsegError, OSError) as exc:
        log.error("%s", _kv(cmd=args.command, error=type(exc).__name__, detail=str(exc).replace("\n", " ")))
        return 1


if __name__ == "__main__":
    sys.exit(main())
