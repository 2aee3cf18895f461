"""Turn a binary region into segmenter prompts: one tight bounding box, one
foreground point at (or nearest to) the box center, and the four box corners
as background points."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import NoRoiError, ShapeError
from .volume import as_mask

FOREGROUND = "fg"
BACKGROUND = "bg"

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.uint8)


@dataclass(frozen=True)
class PromptSet:
    """Box is (row_min, col_min, row_max, col_max), inclusive. Points are
    ((row, col), label) with exactly one fg entry and four bg entries."""

    box: tuple[int, int, int, int]
    points: tuple[tuple[tuple[int, int], str], ...]

    @property
    def fg_point(self) -> tuple[int, int]:
        return next(rc for rc, label in self.points if label == FOREGROUND)

    @property
    def bg_points(self) -> list[tuple[int, int]]:
        return [rc for rc, label in self.points if label == BACKGROUND]

    def to_json_obj(self) -> dict:
        return {
            "box": [int(v) for v in self.box],
            "points": [{"rc": [int(r), int(c)], "label": label} for (r, c), label in self.points],
        }

    @classmethod
    def from_json_obj(cls, obj) -> "PromptSet":
        box = tuple(int(v) for v in obj["box"])
        points = tuple(
            ((int(p["rc"][0]), int(p["rc"][1])), str(p["label"])) for p in obj["points"]
        )
        return cls(box=box, points=points)


def extract_roi(mask) -> np.ndarray:
    """Largest 4-connected component of the mask (empty in, empty out).

    Equal-sized components tie-break to the one labeled first in row-major
    scan order.
    """
    bits = as_mask(mask)
    if bits.ndim != 2:
        raise ShapeError("roi extraction expects a 2D mask")
    if not bits.any():
        return np.zeros_like(bits)
    labels, n = ndimage.label(bits, structure=_FOUR_CONNECTED)
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    keep = int(counts.argmax())
    return (labels == keep).astype(np.uint8)


def build_prompts(roi, pad: int = 0) -> PromptSet:
    """Prompt set for a nonempty region.

    The box is the tight bounds of the region, optionally padded and clipped
    to the mask bounds. Background points are the four box corners. The
    foreground point is the floor midpoint of the box, snapped to the nearest
    region pixel (Euclidean, ties in row-major order) when the midpoint is
    not itself foreground.
    """
    bits = as_mask(roi).astype(bool)
    if bits.ndim != 2:
        raise ShapeError("prompt construction expects a 2D mask")
    if not bits.any():
        raise NoRoiError("cannot build prompts from an empty region")
    rows = np.flatnonzero(bits.any(axis=1))
    cols = np.flatnonzero(bits.any(axis=0))
    r0, r1 = int(rows[0]), int(rows[-1])
    c0, c1 = int(cols[0]), int(cols[-1])
    if pad:
        r0 = max(0, r0 - pad)
        c0 = max(0, c0 - pad)
        r1 = min(bits.shape[0] - 1, r1 + pad)
        c1 = min(bits.shape[1] - 1, c1 + pad)
    center = ((r0 + r1) // 2, (c0 + c1) // 2)
    if not bits[center]:
        rr, cc = np.nonzero(bits)
        d2 = (rr - center[0]) ** 2 + (cc - center[1]) ** 2
        # ties: smallest squared distance, then row-major order of (rr, cc)
        order = np.lexsort((cc, rr, d2))
        center = (int(rr[order[0]]), int(cc[order[0]]))
    corners = ((r0, c0), (r0, c1), (r1, c0), (r1, c1))
    points = ((center, FOREGROUND),) + tuple((rc, BACKGROUND) for rc in corners)
    return PromptSet(box=(r0, c0, r1, c1), points=points)


def point_box_prompts(point, shape, half_extent: int = 4) -> PromptSet:
    """Fallback prompts: a fixed square box around one foreground point,
    clipped to the image bounds."""
    r, c = int(point[0]), int(point[1])
    if not (0 <= r < shape[0] and 0 <= c < shape[1]):
        raise ShapeError(f"fallback point {point} outside image {shape}")
    r0 = max(0, r - half_extent)
    c0 = max(0, c - half_extent)
    r1 = min(shape[0] - 1, r + half_extent)
    c1 = min(shape[1] - 1, c + half_extent)
    corners = ((r0, c0), (r0, c1), (r1, c0), (r1, c1))
    points = (((r, c), FOREGROUND),) + tuple((rc, BACKGROUND) for rc in corners)
    return PromptSet(box=(r0, c0, r1, c1), points=points)
