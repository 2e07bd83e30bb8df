class ExtractorError(Exception):
    """Base class for extraction failures."""


class BackboneError(ExtractorError):
    """Backbone identifier could not be resolved to a model."""


class LayerError(ExtractorError):
    """Named activation point does not exist in the backbone."""


class GridError(ExtractorError):
    """Token count cannot be arranged into a square spatial grid."""


class NegativeActivationError(ExtractorError):
    """Activations contain negative values and ReLU is disabled."""
