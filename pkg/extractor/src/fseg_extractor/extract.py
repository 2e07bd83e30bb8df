"""Image tiles -> non-negative spatial feature grids (or pooled vectors).

Post-processing applied to raw activations, in order:

1. convolutional maps (1, C, H, W) are transposed to (H, W, C);
   token sequences (1, T, C) drop their leading special tokens (class
   token, then any registers) and are reshaped to the square grid;
2. ReLU, so the export is valid input for non-negative factorization
   (can be disabled for backbones that are already non-negative);
3. optional global average pooling to a 1-d vector for vocabulary
   training.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import GridError, NegativeActivationError

log = logging.getLogger("fseg_extractor")

# tokens beyond the square grid are treated as class/register specials;
# more than this many is assumed to be a shape misunderstanding
MAX_SPECIAL_TOKENS = 8

_IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass(frozen=True)
class ExtractorConfig:
    backbone: str
    layer: str = ""
    apply_relu: bool = True
    drop_class_token: bool = True
    pool: bool = False
    tile_size: int = 256
    preprocess: str = "imagenet"  # imagenet | unit | raw
    weights: str | None = None
    magnification_note: str = ""

    def __post_init__(self):
        if self.tile_size <= 0:
            raise ValueError(f"tile_size must be positive, got {self.tile_size}")
        if self.preprocess not in ("imagenet", "unit", "raw"):
            raise ValueError(f"unknown preprocess mode {self.preprocess!r}")


def load_tile(path, tile_size: int, preprocess: str) -> torch.Tensor:
    img = Image.open(path).convert("RGB")
    if img.size != (tile_size, tile_size):
        img = img.resize((tile_size, tile_size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32)
    if preprocess != "raw":
        arr = arr / 255.0
    if preprocess == "imagenet":
        arr = (arr - _IMAGENET_MEAN) / _IMAGENET_STD
    return torch.from_numpy(arr.transpose(2, 0, 1)).unsqueeze(0)


def tokens_to_grid(tokens: np.ndarray, drop_class_token: bool):
    """(T, C) token sequence -> (side, side, C) grid.

    side = isqrt(T); the leftover T - side^2 leading tokens are specials
    (class token first, registers after).  Returns (grid, n_dropped).
    """
    t = tokens.shape[0]
    side = math.isqrt(t)
    specials = t - side * side
    if specials == 0:
        return tokens.reshape(side, side, -1), 0
    if not drop_class_token or specials > MAX_SPECIAL_TOKENS:
        raise GridError(
            f"token count {t} minus specials is not a perfect square "
            f"(grid {side}x{side} leaves {specials} extra tokens)"
        )
    if specials > 1:
        log.info("dropped_special_tokens count=%d grid=%dx%d", specials, side, side)
    return tokens[specials:].reshape(side, side, -1), specials


def activation_to_grid(act: torch.Tensor, drop_class_token: bool) -> np.ndarray:
    """Raw activation tensor -> (rows, cols, channels) float32 grid."""
    arr = act.detach().cpu()
    if arr.dim() == 4:
        if arr.shape[0] != 1:
            raise GridError(f"expected batch size 1, got shape {tuple(arr.shape)}")
        return arr[0].permute(1, 2, 0).contiguous().numpy().astype(np.float32)
    if arr.dim() == 3:
        if arr.shape[0] != 1:
            raise GridError(f"expected batch size 1, got shape {tuple(arr.shape)}")
        arr = arr[0]
    if arr.dim() == 2:
        grid, _ = tokens_to_grid(arr.numpy().astype(np.float32), drop_class_token)
        return grid
    raise GridError(f"cannot interpret activation of shape {tuple(act.shape)} as a spatial grid")


def postprocess(grid: np.ndarray, cfg: ExtractorConfig) -> np.ndarray:
    if cfg.apply_relu:
        grid = np.maximum(grid, 0.0, dtype=np.float32)
    elif grid.min() < 0:
        raise NegativeActivationError(
            f"activations reach {float(grid.min()):.4g} but ReLU is disabled"
        )
    return np.ascontiguousarray(grid, dtype=np.float32)


def pool_grid(grid: np.ndarray) -> np.ndarray:
    """Global average pooling; mirrors the consumer's per-channel mean."""
    return grid.astype(np.float64).mean(axis=(0, 1)).astype(np.float32)


def extract_image(model: torch.nn.Module, path, cfg: ExtractorConfig) -> np.ndarray:
    """One tile -> post-processed grid (or pooled vector when cfg.pool)."""
    from .backbones import capture_activation

    batch = load_tile(path, cfg.tile_size, cfg.preprocess)
    act = capture_activation(model, cfg.layer, batch)
    grid = postprocess(activation_to_grid(act, cfg.drop_class_token), cfg)
    return pool_grid(grid) if cfg.pool else grid
