"""casc: a batch cascade engine that turns image-level cues into volumetric
segmentation pseudo-labels and self-trained predictions, with all learned
models behind a swappable backend boundary."""

__version__ = "0.1.0"
