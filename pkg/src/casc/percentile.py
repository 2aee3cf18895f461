"""Nearest-rank order statistics shared by thresholding, filtering and metrics.

All percentile logic in the engine goes through :func:`nearest_rank` so the
convention is identical everywhere: the p-th percentile of n sorted values is
the value at rank ceil(p/100 * n), 1-indexed, with p = 0 mapping to the
minimum. The rank is computed with exact rational arithmetic so float
percentages such as 80.0 can never round across an integer boundary.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def nearest_rank(values, pct) -> float:
    """Return the nearest-rank ``pct``-th percentile of ``values``.

    ``values`` may be any array-like of reals; ``pct`` must lie in [0, 100].
    """
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("nearest_rank needs at least one value")
    if not (0 <= pct <= 100):
        raise ValueError(f"percentile {pct!r} outside [0, 100]")
    ordered = np.sort(arr)
    if pct <= 0:
        return float(ordered[0])
    rank = math.ceil(Fraction(pct) * len(ordered) / 100)
    rank = min(max(rank, 1), len(ordered))
    return float(ordered[rank - 1])
