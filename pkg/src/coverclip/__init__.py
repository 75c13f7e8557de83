"""Dual-encoder cover/title retrieval trained with OCR-guided auxiliary heads.

Training adds a presence classifier and an image-text matching head on top
of the image tower; retrieval uses only the two encoders.
"""

from .autograd import ConfigError, GraphError, ShapeError, Tensor
from .encoders import DualEncoder, ModelConfig
from .metrics import MetricReport, QueryGroup
from .training import ABLATIONS, LossWeights, TrainConfig, train

__all__ = [
    "ABLATIONS", "ConfigError", "DualEncoder", "GraphError", "LossWeights", "MetricReport",
    "ModelConfig", "QueryGroup", "ShapeError", "Tensor", "TrainConfig", "train",
]
__version__ = "0.1.0"
