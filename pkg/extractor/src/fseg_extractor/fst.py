"""Minimal writer for the FST interchange format (v1).

Kept dependency-free on purpose: the format is the wire contract between
this exporter and the segmentation toolkit, so the byte layout is spelled
out here rather than imported.

    bytes 0-3   magic ``FSEG``
    bytes 4-5   version u16 = 1
    byte  6     dtype u8 (0 = float32)
    byte  7     ndim u8 (1 or 3 for exports)
    next        ndim x u32 dims (rows, cols, channels for ndim=3)
    then        payload, row-major float32, little-endian
"""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FSEG"
VERSION = 1
DTYPE_F32 = 0


def _write(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if (arr < 0).any():
        raise ValueError("FST feature payloads must be non-negative")
    header = struct.pack("<4sHBB", MAGIC, VERSION, DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def write_tensor(path, grid: np.ndarray) -> None:
    """Write a (rows, cols, channels) feature grid."""
    if grid.ndim != 3:
        raise ValueError(f"expected a 3-d grid, got shape {grid.shape}")
    _write(path, grid)


def write_vector(path, vec: np.ndarray) -> None:
    """Write a 1-d pooled feature vector."""
    if vec.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {vec.shape}")
    _write(path, vec)
