import numpy as np
import pytest
from PIL import Image

from fseg import DenseMatrix, FeatureTensor


def make_tensor(seed: int, rows: int, cols: int, channels: int) -> FeatureTensor:
    rng = np.random.default_rng(seed)
    return FeatureTensor(rng.random((rows, cols, channels), dtype=np.float32))


def block_prototypes(p: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    """p well-separated non-negative prototypes: disjoint dominant channel
    blocks over a small positive floor."""
    assert channels >= 2 * p
    protos = np.full((p, channels), 0.05)
    width = channels // p
    for i in range(p):
        protos[i, i * width : i * width + width] = 0.8 + 0.4 * rng.random(width)
    return protos


def mosaic_tensor(protos: np.ndarray, pixels_per_region: int, noise_frac: float, rng):
    """Tensor of horizontal stripes, one prototype per stripe, with additive
    noise bounded by noise_frac of each prototype's norm.  Returns the
    tensor and the true per-pixel stripe labels."""
    p, channels = protos.shape
    rows, cols = p, pixels_per_region
    data = np.empty((rows, cols, channels), dtype=np.float64)
    labels = np.empty((rows, cols), dtype=np.uint32)
    for i in range(p):
        base = protos[i]
        for j in range(cols):
            noise = rng.standard_normal(channels)
            noise *= noise_frac * np.linalg.norm(base) / max(np.linalg.norm(noise), 1e-12)
            data[i, j] = np.maximum(base + noise * rng.random(), 0.0)
            labels[i, j] = i
    return FeatureTensor(data.astype(np.float32)), labels


def save_code_image(path, codes: np.ndarray) -> None:
    """Write a single-channel 8-bit mask image of raw integer codes."""
    Image.fromarray(codes.astype(np.uint8), mode="L").save(path)


@pytest.fixture
def dm():
    def build(arr):
        return DenseMatrix(np.asarray(arr, dtype=np.float32))

    return build
