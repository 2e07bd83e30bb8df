"""``fseg-extract``: batch tiles through a backbone into FST files."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .backbones import resolve_backbone
from .errors import ExtractorError
from .extract import ExtractorConfig, extract_image
from .fst import write_tensor, write_vector

log = logging.getLogger("fseg_extractor")

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif", ".pgm"}


class _KvFormatter(logging.Formatter):
    def format(self, record):
        return f"{record.levelname.lower()} {record.getMessage()}"


def _setup_logging():
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_KvFormatter())
    log.handlers[:] = [handler]
    log.setLevel(logging.INFO)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fseg-extract",
                                description="Export backbone activations as FST feature tensors")
    p.add_argument("input", help="an image tile or a directory of tiles")
    p.add_argument("out_dir")
    p.add_argument("--backbone", required=True,
                   help="model file path or torchvision:<name>")
    p.add_argument("--layer", default="",
                   help="named activation point; empty uses the model output "
                        "(for the standard 50-layer residual network use layer3, "
                        "the second-to-last block, which keeps a finer grid)")
    p.add_argument("--weights", help="state-dict file for torchvision backbones")
    p.add_argument("--tile-size", type=int, default=256)
    p.add_argument("--pool", action="store_true", help="emit 1-d pooled vectors instead of grids")
    p.add_argument("--no-relu", action="store_true")
    p.add_argument("--keep-class-token", action="store_true",
                   help="fail instead of dropping special tokens")
    p.add_argument("--preprocess", choices=["imagenet", "unit", "raw"], default="imagenet")
    p.add_argument("--note", default="", help="free-text magnification/provenance note")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--version", action="version", version=f"fseg-extract {__version__}")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    _setup_logging()
    started = time.monotonic()

    cfg = ExtractorConfig(
        backbone=args.backbone,
        layer=args.layer,
        apply_relu=not args.no_relu,
        drop_class_token=not args.keep_class_token,
        pool=args.pool,
        tile_size=args.tile_size,
        preprocess=args.preprocess,
        weights=args.weights,
        magnification_note=args.note,
    )

    src = Path(args.input)
    if src.is_file():
        files = [src]
    else:
        files = sorted(p for p in src.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not files:
        log.error("no_input_tiles input=%s", args.input)
        return 1

    try:
        model = resolve_backbone(cfg.backbone, weights=cfg.weights)
    except ExtractorError as exc:
        log.error("backbone_error detail=%s", str(exc).replace("\n", " "))
        return 1

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def work(f: Path):
        result = extract_image(model, f, cfg)
        target = out / f"{f.stem}.fst"
        if cfg.pool:
            write_vector(target, result)
        else:
            write_tensor(target, result)
        return target.name

    failures = 0
    produced = []
    if args.jobs > 1 and len(files) > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            def wrap(f):
                try:
                    return work(f), None
                except Exception as exc:
                    return f.name, exc
            rows = list(pool.map(wrap, files))
    else:
        rows = []
        for f in files:
            try:
                rows.append((work(f), None))
            except Exception as exc:
                rows.append((f.name, exc))
    for name, exc in rows:
        if exc is None:
            produced.append(name)
        else:
            failures += 1
            log.error("tile_failed item=%s error=%s detail=%s",
                      name, type(exc).__name__, str(exc).replace("\n", " "))

    manifest = {
        "tool": f"fseg-extract {__version__}",
        "config": asdict(cfg),
        "argv": argv,
        "inputs": [str(f) for f in files],
        "outputs": sorted(produced),
        "failures": failures,
        "duration_seconds": round(time.monotonic() - started, 6),
    }
    (out / "extract_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("extract_done tiles=%d failed=%d pooled=%s", len(files), failures, cfg.pool)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
