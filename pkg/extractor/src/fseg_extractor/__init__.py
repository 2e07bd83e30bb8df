"""Feature-tensor exporter for pretrained vision backbones."""

__version__ = "0.1.0"

from .backbones import capture_activation, resolve_backbone
from .errors import (
    BackboneError,
    ExtractorError,
    GridError,
    LayerError,
    NegativeActivationError,
)
from .extract import (
    ExtractorConfig,
    activation_to_grid,
    extract_image,
    load_tile,
    pool_grid,
    postprocess,
    tokens_to_grid,
)
from .fst import write_tensor, write_vector
