"""Deterministic seed derivation so parallel order never changes results."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *scope) -> int:
    """Stable 64-bit seed from a root seed and scope tokens (ids, indices)."""
    text = "|".join([str(int(root))] + [str(part) for part in scope])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(root: int, *scope) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *scope))
