"""Backend boundary: every learned component (embedder, classifier with
gradient maps, promptable segmenter, trainable volumetric segmenter) sits
behind this interface, either in-process (analytic) or over the external
process protocol."""

from .base import (  # noqa: F401
    ALL_CAPABILITIES,
    CAP_EMBED_IMAGE,
    CAP_EMBED_TEXT,
    CAP_GRADIENT_MAPS,
    CAP_PREDICT_VOLUME,
    CAP_SEGMENT_PROMPTED,
    CAP_TRAIN_CLASSIFIER,
    CAP_TRAIN_SEGMENTER,
    Backend,
    BackendDescriptor,
    GradientMaps,
    require_capability,
)
from .analytic import AnalyticBackend, AnalyticSettings  # noqa: F401
