"""Feature tensor, matrix and label mask serialization.

All numeric artifacts move between tools as FST files, a fixed
little-endian container that is byte-identical across platforms:

    bytes 0-3   magic ``FSEG``
    bytes 4-5   format version, u16 (currently 1)
    byte  6     dtype code, u8: 0 = float32, 1 = uint32 labels
    byte  7     ndim, u8, one of {1, 2, 3}
    next        ndim x u32 dimension sizes
                ndim=3: rows, cols, channels; ndim=2: n_rows, n_cols
    then        payload, row-major, one dtype-sized element per entry
    trailer     u32 n_labels, present only for dtype=1

There is no compression and no padding; a file's size is fully determined
by its header.  Label payloads written by this module always use ndim=2
(one-dimensional masks are stored as a single row); ndim=1 files produced
by other tools are read back as 1 x n objects.

Ground-truth masks arrive as single-channel images whose pixel values are
dataset-specific category codes.  They are remapped to contiguous labels
through a user-supplied :class:`Palette`; codes missing from the palette
get the ignore label (one past the last category), which every metric in
this package skips.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FstFormatError, InputError, PaletteError, UnsupportedError

MAGIC = b"FSEG"
VERSION = 1
DTYPE_F32 = 0
DTYPE_LABEL = 1

_U32_MAX = 0xFFFFFFFF


def _check_tensor_data(arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        bad = int(np.flatnonzero(~np.isfinite(arr.reshape(-1)))[0])
        raise InputError(f"feature tensor data must be finite, found {arr.reshape(-1)[bad]!r} at flat index {bad}")
    flat = arr.reshape(-1)
    neg = np.flatnonzero(flat < 0)
    if neg.size:
        i = int(neg[0])
        raise InputError(f"feature tensor data must be non-negative, found {float(flat[i])} at flat index {i}")


@dataclass(frozen=True, eq=False)
class FeatureTensor:
    """Non-negative spatial activation grid, shape (rows, cols, channels)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise InputError(f"feature tensor must have 3 dimensions, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise InputError(f"feature tensor dimensions must be positive, got shape {arr.shape}")
        _check_tensor_data(arr)
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def as_matrix(self) -> np.ndarray:
        """Flattened (rows*cols) x channels view of the grid."""
        return self.data.reshape(self.rows * self.cols, self.channels)

    def __eq__(self, other):
        return (
            isinstance(other, FeatureTensor)
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True, eq=False)
class DenseMatrix:
    """Row-major float32 matrix, shape (n_rows, n_cols)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise InputError(f"matrix must have 2 dimensions, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise InputError(f"matrix dimensions must be positive, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise InputError("matrix data must be finite")
        object.__setattr__(self, "data", arr)

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def n_cols(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        return (
            isinstance(other, DenseMatrix)
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Integer label grid; every label is < n_labels."""

    labels: np.ndarray
    n_labels: int

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise InputError(f"label mask must have 1 or 2 dimensions, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise InputError(f"label mask dimensions must be positive, got shape {arr.shape}")
        if arr.dtype.kind not in "iu":
            raise InputError(f"labels must be integers, got dtype {arr.dtype}")
        if arr.dtype.kind == "i" and (arr < 0).any():
            raise InputError("labels must be non-negative")
        if self.n_labels < 1:
            raise InputError(f"n_labels must be positive, got {self.n_labels}")
        arr = np.ascontiguousarray(arr, dtype=np.uint32)
        if arr.size and int(arr.max()) >= self.n_labels:
            raise InputError(f"label {int(arr.max())} out of range for n_labels={self.n_labels}")
        object.__setattr__(self, "labels", arr)

    @property
    def rows(self) -> int:
        return self.labels.shape[0]

    @property
    def cols(self) -> int:
        return self.labels.shape[1]

    def __eq__(self, other):
        return (
            isinstance(other, LabelMask)
            and self.n_labels == other.n_labels
            and self.labels.shape == other.labels.shape
            and self.labels.tobytes() == other.labels.tobytes()
        )


FstObject = FeatureTensor | DenseMatrix | LabelMask


def write_fst(path, obj: FstObject) -> None:
    """Serialize a tensor, matrix or mask to ``path`` in FST v1 layout.

    Invariants are re-checked before any byte is written, so an object
    mutated into an invalid state is rejected rather than persisted.
    """
    if isinstance(obj, FeatureTensor):
        _check_tensor_data(obj.data)
        dtype, payload = DTYPE_F32, obj.data
        dims, trailer = obj.data.shape, b""
    elif isinstance(obj, DenseMatrix):
        if not np.isfinite(obj.data).all():
            raise InputError("matrix data must be finite")
        dtype, payload = DTYPE_F32, obj.data
        dims, trailer = obj.data.shape, b""
    elif isinstance(obj, LabelMask):
        if obj.labels.size and int(obj.labels.max()) >= obj.n_labels:
            raise InputError(f"label {int(obj.labels.max())} out of range for n_labels={obj.n_labels}")
        dtype, payload = DTYPE_LABEL, obj.labels
        dims, trailer = obj.labels.shape, struct.pack("<I", obj.n_labels)
    else:
        raise InputError(f"cannot serialize object of type {type(obj).__name__}")

    if max(dims) > _U32_MAX:
        raise FstFormatError(f"{path}: dimension overflow, {max(dims)} does not fit in u32")
    header = struct.pack("<4sHBB", MAGIC, VERSION, dtype, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims)
    body = np.ascontiguousarray(payload, dtype="<f4" if dtype == DTYPE_F32 else "<u4").tobytes()
    Path(path).write_bytes(header + body + trailer)


def read_fst(path) -> FstObject:
    """Parse an FST file; the header decides which object type comes back.

    dtype=1 yields a LabelMask (1-dim files become a single row);
    dtype=0 yields a FeatureTensor for ndim=3, otherwise a DenseMatrix
    (1-dim vectors come back as 1 x n).
    """
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FstFormatError(f"{path}: truncated header, {len(raw)} bytes")
    magic, version, dtype, ndim = struct.unpack_from("<4sHBB", raw, 0)
    if magic != MAGIC:
        raise FstFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FstFormatError(f"{path}: unsupported version {version}")
    if dtype not in (DTYPE_F32, DTYPE_LABEL):
        raise FstFormatError(f"{path}: unknown dtype code {dtype}")
    if ndim not in (1, 2, 3):
        raise FstFormatError(f"{path}: ndim must be 1, 2 or 3, got {ndim}")
    if len(raw) < 8 + 4 * ndim:
        raise FstFormatError(f"{path}: truncated dimension block")
    dims = struct.unpack_from(f"<{ndim}I", raw, 8)
    if min(dims) < 1:
        raise FstFormatError(f"{path}: dimension sizes must be positive, got {dims}")
    count = 1
    for d in dims:
        count *= d
    if count > _U32_MAX:
        raise FstFormatError(f"{path}: dimension overflow, {dims} declares {count} elements")
    offset = 8 + 4 * ndim
    expected = offset + 4 * count + (4 if dtype == DTYPE_LABEL else 0)
    if len(raw) < expected:
        raise FstFormatError(
            f"{path}: truncated payload, dims {dims} need {expected} bytes but file has {len(raw)}"
        )
    if len(raw) > expected:
        raise FstFormatError(f"{path}: {len(raw) - expected} trailing bytes after payload")

    if dtype == DTYPE_LABEL:
        labels = np.frombuffer(raw, dtype="<u4", count=count, offset=offset).copy()
        (n_labels,) = struct.unpack_from("<I", raw, offset + 4 * count)
        shape = dims if ndim == 2 else (1, count)
        if ndim == 3:
            raise FstFormatError(f"{path}: label payloads must be 1- or 2-dimensional")
        try:
            return LabelMask(labels.reshape(shape), n_labels)
        except InputError as exc:
            raise FstFormatError(f"{path}: {exc}") from exc

    values = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).copy()
    try:
        if ndim == 3:
            return FeatureTensor(values.reshape(dims))
        return DenseMatrix(values.reshape(dims if ndim == 2 else (1, count)))
    except InputError as exc:
        raise FstFormatError(f"{path}: {exc}") from exc


def read_fst_header(path) -> dict:
    """Decode an FST header without loading the payload."""
    p = Path(path)
    size = p.stat().st_size
    with open(p, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8:
            raise FstFormatError(f"{path}: truncated header, {len(head)} bytes")
        magic, version, dtype, ndim = struct.unpack("<4sHBB", head)
        if magic != MAGIC:
            raise FstFormatError(f"{path}: bad magic {magic!r}")
        if ndim not in (1, 2, 3):
            raise FstFormatError(f"{path}: ndim must be 1, 2 or 3, got {ndim}")
        dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        info = {
            "version": version,
            "dtype": "f32" if dtype == DTYPE_F32 else "u32-labels",
            "ndim": ndim,
            "dims": list(dims),
            "bytes": size,
        }
        if dtype == DTYPE_LABEL:
            fh.seek(size - 4)
            (info["n_labels"],) = struct.unpack("<I", fh.read(4))
    return info


@dataclass(frozen=True)
class Palette:
    """Maps dataset pixel codes to contiguous category labels 0..n-1."""

    mapping: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.mapping:
            raise PaletteError("palette is empty")
        targets = set(self.mapping.values())
        if min(targets) < 0:
            raise PaletteError("palette target labels must be non-negative")
        if targets != set(range(max(targets) + 1)):
            raise PaletteError(f"palette target labels must be contiguous from 0, got {sorted(targets)}")

    @property
    def n_categories(self) -> int:
        return max(self.mapping.values()) + 1

    @property
    def ignore_label(self) -> int:
        """Label given to pixels whose code is absent from the palette."""
        return self.n_categories


def load_palette(path, forbid_collisions: bool = False) -> Palette:
    """Parse a palette file of ``source_code target_label`` lines.

    ``#`` starts a comment.  A source code listed twice is always an
    error; two codes mapping to the same target is an error only when
    ``forbid_collisions`` is set.
    """
    mapping: dict[int, int] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        if len(parts) != 2:
            raise PaletteError(f"{path}:{lineno}: expected 'source_code target_label', got {line!r}")
        try:
            code, label = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise PaletteError(f"{path}:{lineno}: non-integer palette entry {line!r}") from exc
        if code in mapping:
            raise PaletteError(f"{path}:{lineno}: source code {code} listed twice")
        if forbid_collisions and label in mapping.values():
            raise PaletteError(f"{path}:{lineno}: target label {label} already used and collisions are forbidden")
        mapping[code] = label
    return Palette(mapping)


def read_gt_mask(path, palette: Palette) -> LabelMask:
    """Load a ground-truth mask image and remap codes through ``palette``.

    Unmapped codes become ``palette.ignore_label``; when that happens the
    returned mask reserves one extra label slot for it.
    """
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise InputError(f"unreadable image {path}: {exc}") from exc
    if len(img.getbands()) != 1:
        raise InputError(f"{path}: expected a single-channel mask image, got mode {img.mode}")
    codes = np.asarray(img)
    if codes.dtype.kind not in "iu":
        raise InputError(f"{path}: mask pixels must be integer codes, got dtype {codes.dtype}")

    ignore = palette.ignore_label
    lut_size = max(int(codes.max()) if codes.size else 0, max(palette.mapping)) + 1
    lut = np.full(lut_size, ignore, dtype=np.uint32)
    for code, label in palette.mapping.items():
        lut[code] = label
    out = lut[codes.astype(np.int64)]
    n_labels = ignore + 1 if (out == ignore).any() else palette.n_categories
    return LabelMask(out, n_labels)


def write_mask_pgm(path, mask: LabelMask, scale: bool = False) -> None:
    """Write a binary PGM (P5, maxval 255) of the mask plus a sidecar.

    scale=False stores raw label values; scale=True stretches labels to
    0..255.  The ``<stem>.labels.txt`` sidecar records the label-to-pixel
    mapping actually used.
    """
    if mask.n_labels > 256:
        raise UnsupportedError(f"PGM export supports at most 256 labels, mask has {mask.n_labels}")
    if scale and mask.n_labels > 1:
        values = np.rint(mask.labels * (255.0 / (mask.n_labels - 1))).astype(np.uint8)
    elif scale:
        values = np.zeros_like(mask.labels, dtype=np.uint8)
    else:
        values = mask.labels.astype(np.uint8)

    path = Path(path)
    header = f"P5\n{mask.cols} {mask.rows}\n255\n".encode("ascii")
    path.write_bytes(header + values.tobytes())

    lut = {int(l): int(v) for l, v in zip(mask.labels.reshape(-1), values.reshape(-1))}
    lines = ["# label pgm_value"]
    lines += [f"{l} {lut[l]}" for l in sorted(lut)]
    path.with_suffix(".labels.txt").write_text("\n".join(lines) + "\n")
