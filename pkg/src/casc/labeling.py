"""Image-level labels from embeddings, activation-map fusion, and masking
augmentation.

The slice label comes from a softmax over cosine similarities between one
image embedding and one text embedding per class. Activation maps are built
per layer from channel gradients, fused across layers by min-max
normalization and elementwise max, and thresholded at a percentile computed
over brain pixels only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InvalidEmbeddingError, ShapeError
from .percentile import nearest_rank
from .seeding import rng_for
from .volume import as_mask

CAM_FORMULA_GRADIENT = "gradient"
CAM_FORMULA_GRADIENT_ACTIVATION = "gradient_activation"


@dataclass
class CamMap:
    """A 2D activation map; values are in [0, 1] only after fusion."""

    values: np.ndarray
    layer_ids: tuple[str, ...] = ()


@dataclass
class AugmentedSlice:
    pixels: np.ndarray
    applied_mask: np.ndarray
    label: int


def clip_probabilities(image_embedding, text_embeddings) -> np.ndarray:
    """Class probabilities: softmax over cosine similarities to each text.

    Raises InvalidEmbeddingError for zero-norm vectors and ShapeError for
    dimension mismatches; at least two classes are required.
    """
    img = np.asarray(image_embedding, dtype=np.float64).ravel()
    texts = [np.asarray(t, dtype=np.float64).ravel() for t in text_embeddings]
    if len(texts) < 2:
        raise ContractError("need at least two class text embeddings")
    img_norm = np.linalg.norm(img)
    if img_norm < 1e-12:
        raise InvalidEmbeddingError("image embedding has zero norm")
    sims = np.empty(len(texts))
    for c, vec in enumerate(texts):
        if vec.shape != img.shape:
            raise ShapeError(f"text embedding {c} has dim {vec.size}, image has {img.size}")
        norm = np.linalg.norm(vec)
        if norm < 1e-12:
            raise InvalidEmbeddingError(f"text embedding {c} has zero norm")
        sims[c] = float(img @ vec) / (img_norm * norm)
    exps = np.exp(sims - sims.max())
    return exps / exps.sum()


def assign_label(probs) -> int:
    """Argmax class index; exact ties resolve to class 0 (no target)."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    if p.size != 2:
        raise ContractError(f"binary labeling expects two classes, got {p.size}")
    return 0 if p[0] >= p[1] else 1


def layer_cam(channel_gradients, layer_id="layer", activations=None,
              formula=CAM_FORMULA_GRADIENT) -> CamMap:
    """Combine one layer's channel gradients into a single raw map.

    Default formula: sum over channels of (channel mean gradient) times the
    rectified gradient, clamped at zero so the map is never negative. The
    "gradient_activation" variant instead weights each channel's activation
    map elementwise by its rectified gradient, which requires ``activations``
    of the same shape.
    """
    grads = np.asarray(channel_gradients, dtype=np.float64)
    if grads.ndim == 2:
        grads = grads[None]
    if grads.ndim != 3 or grads.shape[0] == 0:
        raise ContractError("layer_cam needs at least one channel of 2D gradients")
    if formula == CAM_FORMULA_GRADIENT:
        weights = grads.mean(axis=(1, 2))
        combined = np.einsum("k,khw->hw", weights, np.maximum(grads, 0.0))
    elif formula == CAM_FORMULA_GRADIENT_ACTIVATION:
        if activations is None:
            raise ContractError("gradient_activation formula needs activations")
        acts = np.asarray(activations, dtype=np.float64)
        if acts.ndim == 2:
            acts = acts[None]
        if acts.shape != grads.shape:
            raise ShapeError(f"activations {acts.shape} do not match gradients {grads.shape}")
        combined = (np.maximum(grads, 0.0) * acts).sum(axis=0)
    else:
        raise ContractError(f"unknown cam formula {formula!r}")
    return CamMap(values=np.maximum(combined, 0.0), layer_ids=(layer_id,))


def _minmax(values: np.ndarray) -> np.ndarray:
    lo = values.min()
    hi = values.max()
    if hi - lo <= 0:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def bilinear_resize(values: np.ndarray, target_shape) -> np.ndarray:
    """Bilinear resize with corner alignment (corner samples are preserved)."""
    src = np.asarray(values, dtype=np.float64)
    th, tw = int(target_shape[0]), int(target_shape[1])
    sh, sw = src.shape
    if (sh, sw) == (th, tw):
        return src.copy()
    rows = np.linspace(0, sh - 1, th) if th > 1 else np.zeros(1)
    cols = np.linspace(0, sw - 1, tw) if tw > 1 else np.zeros(1)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, sh - 1)
    c1 = np.minimum(c0 + 1, sw - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    top = src[np.ix_(r0, c0)] * (1 - fc) + src[np.ix_(r0, c1)] * fc
    bot = src[np.ix_(r1, c0)] * (1 - fc) + src[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bot * fr


def fuse_and_upsample(layers, target_shape) -> CamMap:
    """Min-max normalize each layer map, resize to target, fuse by max."""
    maps = list(layers)
    if not maps:
        raise ContractError("fuse_and_upsample needs at least one layer map")
    fused = None
    layer_ids: tuple[str, ...] = ()
    for cam in maps:
        values = np.asarray(cam.values, dtype=np.float64)
        if not np.isfinite(values).all():
            raise ShapeError("activation map contains non-finite values")
        resized = bilinear_resize(_minmax(values), target_shape)
        fused = resized if fused is None else np.maximum(fused, resized)
        layer_ids = layer_ids + tuple(cam.layer_ids)
    fused = np.clip(fused, 0.0, 1.0)
    return CamMap(values=fused, layer_ids=layer_ids)


def threshold_mask(cam: CamMap, alpha, brain) -> np.ndarray:
    """Select roughly the top alpha percent most activated brain pixels.

    The cut is strictly above the (100 - alpha)-th nearest-rank percentile of
    the map restricted to brain pixels. Pixels outside the brain are never
    selected; an empty brain yields an empty mask.
    """
    if not (0 <= alpha <= 100):
        raise ContractError(f"alpha {alpha!r} outside [0, 100]")
    values = np.asarray(cam.values, dtype=np.float64)
    brain8 = as_mask(brain)
    if values.shape != brain8.shape:
        raise ShapeError(f"cam {values.shape} vs brain {brain8.shape}")
    out = np.zeros(values.shape, dtype=np.uint8)
    inside = brain8.astype(bool)
    if alpha <= 0 or not inside.any():
        return out
    cut = nearest_rank(values[inside], 100 - alpha)
    out[(values > cut) & inside] = 1
    return out


def _random_rectangle(brain: np.ndarray, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Seeded axis-aligned rectangle inside the brain bounding box whose brain
    coverage is close to alpha percent (within 2 percentage points when
    attainable, else the best candidate found)."""
    out = np.zeros(brain.shape, dtype=np.uint8)
    inside = brain.astype(bool)
    count = int(inside.sum())
    if alpha <= 0 or count == 0:
        return out
    rows = np.flatnonzero(inside.any(axis=1))
    cols = np.flatnonzero(inside.any(axis=0))
    rmin, rmax = int(rows[0]), int(rows[-1])
    cmin, cmax = int(cols[0]), int(cols[-1])
    target = alpha / 100.0 * count
    band = 0.02 * count
    best = None
    best_err = None
    for _ in range(256):
        h = int(rng.integers(1, rmax - rmin + 2))
        w = int(rng.integers(1, cmax - cmin + 2))
        r0 = int(rng.integers(rmin, rmax - h + 2))
        c0 = int(rng.integers(cmin, cmax - w + 2))
        covered = int(inside[r0 : r0 + h, c0 : c0 + w].sum())
        err = abs(covered - target)
        if best_err is None or err < best_err:
            best_err = err
            best = (r0, c0, h, w)
        if err <= band:
            break
    r0, c0, h, w = best
    out[r0 : r0 + h, c0 : c0 + w] = 1
    return out


def amda_augment(slice_pixels, label, cam, alpha, rng_seed, brain=None) -> AugmentedSlice:
    """Mask the most activated region (positives) or a seeded random
    rectangle (negatives) out of a slice, keeping the label.

    Positive slices require their activation map; negatives must not pass
    one. The masked pixels are set to zero via pixels * (1 - mask). The brain
    mask defaults to the nonzero pixels of the slice; callers that cached the
    pre-normalization mask should pass it explicitly.
    """
    pixels = np.asarray(slice_pixels, dtype=np.float32)
    if pixels.ndim != 2:
        raise ShapeError("slice must be 2D")
    brain = (pixels != 0).astype(np.uint8) if brain is None else as_mask(brain)
    if label == 1:
        if cam is None:
            raise ContractError("positive slice needs an activation map")
        applied = threshold_mask(cam, alpha, brain)
    elif label == 0:
        if cam is not None:
            raise ContractError("negative slice must not pass an activation map")
        applied = _random_rectangle(brain, float(alpha), rng_for(rng_seed, "amda-rect"))
    else:
        raise ContractError(f"label must be 0 or 1, got {label!r}")
    augmented = pixels * (1 - applied.astype(np.float32))
    return AugmentedSlice(pixels=augmented, applied_mask=applied, label=int(label))
