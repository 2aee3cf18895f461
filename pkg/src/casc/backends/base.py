"""Abstract backend interface and capability declarations.

Training calls have overwrite semantics: each call (re)trains from the given
manifest alone, never from residue of earlier calls. That keeps every
pipeline stage self-contained, so a resumed run cannot see different model
state than an uninterrupted one. Manifest tensor paths are relative to the
manifest file's directory, and all image/volume data crossing this boundary
is already brain-normalized.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

from ..errors import CapabilityError
from ..prompting import PromptSet

CAP_EMBED_IMAGE = "embed_image"
CAP_EMBED_TEXT = "embed_text"
CAP_TRAIN_CLASSIFIER = "train_classifier"
CAP_GRADIENT_MAPS = "gradient_maps"
CAP_SEGMENT_PROMPTED = "segment_prompted"
CAP_TRAIN_SEGMENTER = "train_segmenter"
CAP_PREDICT_VOLUME = "predict_volume"

ALL_CAPABILITIES = frozenset(
    {
        CAP_EMBED_IMAGE,
        CAP_EMBED_TEXT,
        CAP_TRAIN_CLASSIFIER,
        CAP_GRADIENT_MAPS,
        CAP_SEGMENT_PROMPTED,
        CAP_TRAIN_SEGMENTER,
        CAP_PREDICT_VOLUME,
    }
)


@dataclass(frozen=True)
class BackendDescriptor:
    kind: str
    capabilities: frozenset = field(default_factory=frozenset)
    layer_ids: tuple[str, ...] = ()


@dataclass
class GradientMaps:
    """Classifier output for one slice: tumor-class probability plus, per
    declared layer, a (channels, h, w) gradient grid and optionally matching
    activation grids for the elementwise fusion variant."""

    probability: float
    layers: dict[str, np.ndarray]
    activations: dict[str, np.ndarray] | None = None


def require_capability(backend: "Backend", capability: str) -> None:
    descriptor = backend.describe()
    if capability not in descriptor.capabilities:
        raise CapabilityError(f"backend {descriptor.kind!r} does not declare {capability!r}")


class Backend(ABC):
    """One object per configured backend; all methods are synchronous."""

    @abstractmethod
    def describe(self) -> BackendDescriptor: ...

    @abstractmethod
    def embed_image(self, image: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def embed_text(self, text: str) -> np.ndarray: ...

    @abstractmethod
    def train_classifier(self, manifest_path: str, seed: int = 0) -> None: ...

    @abstractmethod
    def gradient_maps(self, image: np.ndarray) -> GradientMaps: ...

    @abstractmethod
    def segment_prompted(self, image: np.ndarray, prompts: PromptSet) -> np.ndarray: ...

    @abstractmethod
    def train_segmenter(self, manifest_path: str, seed: int = 0) -> None: ...

    @abstractmethod
    def predict_volume(self, voxels: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray: ...

    def close(self) -> None:
        """Release any connections or subprocesses; default is a no-op."""
