"""Deterministic closed-form backends standing in for the learned models.

These exist so the whole cascade can run and be oracle-checked at desk scale
on synthetic bright-blob data. They are intentionally simple:

- image embedding: the brain-pixel intensity histogram (16 bins over [-3, 3]
  in normalized units, values clipped into the end bins) plus the fractions
  of brain pixels above 2.0 and 2.5, both scaled by a fixed emphasis weight
  of 4 so the bright tail is not drowned out by bulk tissue mass. An image
  without brain pixels embeds as a one-hot on the central bin (the
  documented "no brain" constant).
- text embedding: one of two fixed prototype vectors built the same way from
  closed-form histograms: the healthy prototype is the expected histogram of
  pure standard-normal tissue, the bright-class prototype mixes in a 3%
  component at intensity 3+. Any text containing the word "tumor" selects
  the bright-class prototype, so the cosine rule labels a slice positive
  once its bright tail exceeds roughly half the prototype's mixture weight.
- gradient maps: one layer, one channel holding the Gaussian-smoothed
  rectified deviation of each brain pixel from the slice's brain median, so
  maps peak on bright blobs. Training on an augmented manifest widens the
  smoothing kernel, spreading attention beyond the brightest core.
- promptable segmenter: 4-connected region growing from the foreground point
  over pixels within ``tau`` of the seed intensity, clipped to the box and
  blocked at the background points and their 4-neighborhoods.
- trainable volumetric segmenter: remembers, per axial slice index, the
  union bounding box of the training labels, and predicts by Otsu
  thresholding each volume's brain intensities inside those boxes. Cleaner
  training labels give tighter boxes and therefore better predictions.

Everything is a pure function of (inputs, settings, seed); repeated calls are
bitwise identical.
"""

from __future__ import annotations

import json
import math
import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import BackendError, ShapeError, StateError
from ..prompting import PromptSet
from ..s3f import read_manifest
from ..tensorio import read_tensor
from .base import ALL_CAPABILITIES, Backend, BackendDescriptor, GradientMaps

EMBED_DIM = 18
_HIST_BINS = 16
_HIST_EDGES = np.linspace(-3.0, 3.0, _HIST_BINS + 1)
_EMPTY_BRAIN_BIN = 8  # bin covering intensity 0
_BRIGHT_EMPHASIS = 4.0
_BRIGHT_CUTS = (2.0, 2.5)
_PROTO_BLOB_FRACTION = 0.03


def _normal_cdf(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.vectorize(math.erf)(x / math.sqrt(2.0)))


def _prototype(blob_fraction: float) -> np.ndarray:
    cdf = _normal_cdf(_HIST_EDGES)
    bins = (1.0 - blob_fraction) * np.diff(cdf)
    bins[0] += (1.0 - blob_fraction) * cdf[0]
    bins[-1] += (1.0 - blob_fraction) * (1.0 - cdf[-1]) + blob_fraction
    tails = [
        _BRIGHT_EMPHASIS
        * ((1.0 - blob_fraction) * (1.0 - float(_normal_cdf(np.array([c]))[0])) + blob_fraction)
        for c in _BRIGHT_CUTS
    ]
    return np.concatenate([bins, tails]).astype(np.float32)


TEXT_TEMPLATES = {
    "healthy": _prototype(0.0),
    "tumor": _prototype(_PROTO_BLOB_FRACTION),
}


@dataclass
class AnalyticSettings:
    tau: float = 0.5  # region-grow intensity tolerance, normalized units
    smoothing_sigma: float = 1.5
    retrained_sigma_scale: float = 1.4
    otsu_bins: int = 256
    seed: int = 0


def _read_slice_manifest(manifest_path):
    base = os.path.dirname(os.path.abspath(manifest_path))
    entries = []
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                path = os.path.normpath(os.path.join(base, obj["tensor"]))
                if not os.path.exists(path):
                    raise BackendError(f"manifest tensor missing: {path}")
                entries.append(
                    {
                        "path": path,
                        "slice_index": obj.get("slice_index"),
                        "label": int(obj.get("label", 0)),
                        "augmented": bool(obj.get("augmented", False)),
                    }
                )
    except OSError as exc:
        raise BackendError(f"cannot read manifest {manifest_path}: {exc}") from exc
    return entries


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float | None:
    """Between-class-variance-maximizing cut; None when there is no spread."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        return None
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0:
        return None
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    hist = hist.astype(np.float64)
    centers = (edges[:-1] + edges[1:]) / 2.0
    weight = hist.sum()
    w0 = np.cumsum(hist)
    w1 = weight - w0
    sum0 = np.cumsum(hist * centers)
    total = sum0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = sum0 / w0
        mu1 = (total - sum0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between[~np.isfinite(between)] = -1.0
    k = int(between.argmax())
    return float(edges[k + 1])


def iterated_otsu(values: np.ndarray, bins: int = 256, max_rounds: int = 4) -> float | None:
    """Otsu cut, re-applied to the upper class while the split only divides
    the background mode. Plain Otsu collapses when the foreground holds a few
    percent of the voxels; recursing until the class means separate by three
    background deviations recovers the gap threshold."""
    vals = np.asarray(values, dtype=np.float64).ravel()
    cut = None
    for _ in range(max_rounds):
        cut = otsu_threshold(vals, bins=bins)
        if cut is None:
            return None
        lower = vals[vals <= cut]
        upper = vals[vals > cut]
        if upper.size < 32 or lower.size == 0:
            return cut
        if upper.mean() - lower.mean() >= 3.0 * max(float(lower.std()), 1e-6):
            return cut
        vals = upper
    return cut


class AnalyticBackend(Backend):
    def __init__(self, settings: AnalyticSettings | None = None):
        self.settings = settings or AnalyticSettings()
        self._classifier_spread = 1.0
        self._segmenter_boxes = None  # per-depth union boxes, or None untrained

    # -- descriptor ------------------------------------------------------

    def describe(self) -> BackendDescriptor:
        return BackendDescriptor(
            kind="analytic", capabilities=ALL_CAPABILITIES, layer_ids=("layer0",)
        )

    # -- embeddings ------------------------------------------------------

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        pixels = np.asarray(image, dtype=np.float64)
        if pixels.ndim != 2:
            raise ShapeError("embed_image expects a 2D slice")
        brain = pixels[pixels != 0]
        hist = np.zeros(_HIST_BINS, dtype=np.float64)
        if brain.size == 0:
            hist[_EMPTY_BRAIN_BIN] = 1.0
            fractions = [0.0, 0.0]
        else:
            counts, _ = np.histogram(np.clip(brain, -3.0, 3.0), bins=_HIST_EDGES)
            hist = counts / brain.size
            fractions = [
                _BRIGHT_EMPHASIS * float((brain > c).sum()) / brain.size for c in _BRIGHT_CUTS
            ]
        return np.concatenate([hist, fractions]).astype(np.float32)

    def embed_text(self, text: str) -> np.ndarray:
        key = "tumor" if "tumor" in text.lower() else "healthy"
        return TEXT_TEMPLATES[key].copy()

    # -- classifier ------------------------------------------------------

    def train_classifier(self, manifest_path: str, seed: int = 0) -> None:
        entries = _read_slice_manifest(manifest_path)
        if not entries:
            raise BackendError("classifier manifest is empty")
        augmented = any(e["augmented"] for e in entries)
        self._classifier_spread = self.settings.retrained_sigma_scale if augmented else 1.0

    def gradient_maps(self, image: np.ndarray) -> GradientMaps:
        pixels = np.asarray(image, dtype=np.float64)
        if pixels.ndim != 2:
            raise ShapeError("gradient_maps expects a 2D slice")
        brain = pixels != 0
        deviation = np.zeros_like(pixels)
        if brain.any():
            median = float(np.median(pixels[brain]))
            deviation[brain] = np.maximum(pixels[brain] - median, 0.0)
        sigma = self.settings.smoothing_sigma * self._classifier_spread
        smoothed = gaussian_filter(deviation, sigma=sigma, mode="constant", cval=0.0)
        probability = float(min(1.0, max(0.0, smoothed.max() / 4.0)))
        grads = smoothed[None].astype(np.float32)
        acts = deviation[None].astype(np.float32)
        return GradientMaps(
            probability=probability, layers={"layer0": grads}, activations={"layer0": acts}
        )

    # -- promptable segmenter --------------------------------------------

    def segment_prompted(self, image: np.ndarray, prompts: PromptSet) -> np.ndarray:
        pixels = np.asarray(image, dtype=np.float64)
        if pixels.ndim != 2:
            raise ShapeError("segment_prompted expects a 2D slice")
        h, w = pixels.shape
        fg = prompts.fg_point
        if not (0 <= fg[0] < h and 0 <= fg[1] < w):
            raise BackendError(f"foreground point {fg} outside image {pixels.shape}",
                               code="bad_request")
        r0, c0, r1, c1 = prompts.box
        r0 = max(0, r0)
        c0 = max(0, c0)
        r1 = min(h - 1, r1)
        c1 = min(w - 1, c1)
        blocked = np.zeros((h, w), dtype=bool)
        for (br, bc) in prompts.bg_points:
            for dr, dc in ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)):
                rr, cc = br + dr, bc + dc
                if 0 <= rr < h and 0 <= cc < w:
                    blocked[rr, cc] = True
        eligible = pixels >= pixels[fg] - self.settings.tau
        eligible[: r0] = False
        eligible[r1 + 1 :] = False
        eligible[:, :c0] = False
        eligible[:, c1 + 1 :] = False
        eligible &= ~blocked
        mask = np.zeros((h, w), dtype=np.uint8)
        mask[fg] = 1  # seed is always kept, even when blocked by a degenerate box
        queue = deque([fg])
        while queue:
            r, c = queue.popleft()
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and eligible[rr, cc] and not mask[rr, cc]:
                    mask[rr, cc] = 1
                    queue.append((rr, cc))
        return mask

    # -- trainable volumetric segmenter ----------------------------------

    def train_segmenter(self, manifest_path: str, seed: int = 0) -> None:
        pool = read_manifest(manifest_path)
        base = os.path.dirname(os.path.abspath(manifest_path))
        retained = [e for e in pool.entries if e.retained]
        if not retained:
            raise BackendError("training pool has no retained entries")
        boxes: dict[int, list[int]] = {}
        for entry in retained:
            path = os.path.normpath(os.path.join(base, entry.label_ref))
            if not os.path.exists(path):
                raise BackendError(f"pool label missing: {path}")
            label = read_tensor(path).array
            if label.ndim != 3:
                raise BackendError(f"pool label {path} is not 3D")
            for d in range(label.shape[0]):
                plane = label[d]
                if not plane.any():
                    continue
                rows = np.flatnonzero(plane.any(axis=1))
                cols = np.flatnonzero(plane.any(axis=0))
                box = [int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])]
                if d not in boxes:
                    boxes[d] = box
                else:
                    prev = boxes[d]
                    boxes[d] = [
                        min(prev[0], box[0]),
                        min(prev[1], box[1]),
                        max(prev[2], box[2]),
                        max(prev[3], box[3]),
                    ]
        self._segmenter_boxes = boxes

    def predict_volume(self, voxels: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
        if self._segmenter_boxes is None:
            raise StateError("predict_volume called before train_segmenter")
        vol = np.asarray(voxels, dtype=np.float64)
        if vol.ndim != 3:
            raise ShapeError("predict_volume expects a 3D volume")
        out = np.zeros(vol.shape, dtype=np.uint8)
        brain = vol != 0
        window = np.zeros(vol.shape, dtype=bool)
        for d, (r0, c0, r1, c1) in self._segmenter_boxes.items():
            if d < vol.shape[0]:
                window[d, r0 : r1 + 1, c0 : c1 + 1] = True
        window &= brain
        if not window.any():
            return out
        # threshold from in-window voxels only; the global brain histogram is
        # far too foreground-poor for a stable two-class split
        cut = iterated_otsu(vol[window], bins=self.settings.otsu_bins)
        if cut is None:
            return out
        out[(vol > cut) & window] = 1
        return out
