"""Seeded synthetic corpus: head-shaped volumes of noisy tissue with one or
two bright ellipsoid targets, plus ground-truth masks. Used by the end-to-end
benchmark and by tests that need volumes with known answers."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import tensorio
from .seeding import rng_for
from .volume import Volume


@dataclass
class SynthSettings:
    shape: tuple[int, int, int] = (64, 64, 64)
    tissue_mean: float = 100.0
    tissue_std: float = 10.0
    target_mean: float = 160.0
    # per-volume intra-target noise, drawn uniformly from this range: low
    # values give crisp, stable targets, high values make slice-wise
    # segmentation unstable, which grades pseudo-label quality across volumes
    target_std_range: tuple[float, float] = (2.0, 6.0)
    head_radius_frac: tuple[float, float, float] = (0.42, 0.40, 0.40)
    target_radius: tuple[int, int] = (4, 9)
    second_target_prob: float = 0.3
    center_margin_frac: float = 0.55  # target centers stay this close to volume center


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def generate_volume(volume_id: str, seed: int, settings: SynthSettings | None = None):
    """Return (Volume, gt_mask uint8). Pure function of (volume_id, seed)."""
    settings = settings or SynthSettings()
    rng = rng_for(seed, "synth", volume_id)
    shape = settings.shape
    center = tuple(n / 2.0 for n in shape)
    head_radii = [
        max(3.0, f * n * (1.0 + 0.05 * rng.uniform(-1, 1)))
        for f, n in zip(settings.head_radius_frac, shape)
    ]
    head = _ellipsoid(shape, center, head_radii)
    voxels = np.zeros(shape, dtype=np.float64)
    voxels[head] = rng.normal(settings.tissue_mean, settings.tissue_std, size=int(head.sum()))

    n_targets = 2 if rng.uniform() < settings.second_target_prob else 1
    gt = np.zeros(shape, dtype=bool)
    lo, hi = settings.target_radius
    for _ in range(n_targets):
        radii = rng.integers(lo, hi + 1, size=3).astype(np.float64)
        span = [settings.center_margin_frac * h - r for h, r in zip(head_radii, radii)]
        offset = [rng.uniform(-max(s, 0.0), max(s, 0.0)) for s in span]
        c = tuple(cc + o for cc, o in zip(center, offset))
        gt |= _ellipsoid(shape, c, radii)
    gt &= head  # targets never extend outside the head
    target_std = rng.uniform(*settings.target_std_range)
    voxels[gt] = rng.normal(settings.target_mean, target_std, size=int(gt.sum()))
    # keep the brain mask exact: no tissue voxel may be exactly zero
    zero_tissue = head & (voxels == 0)
    voxels[zero_tissue] = 1e-3
    return Volume(voxels.astype(np.float32), id=volume_id), gt.astype(np.uint8)


def generate_corpus(input_dir, count: int = 40, seed: int = 7,
                    settings: SynthSettings | None = None) -> list[str]:
    """Write volumes to input_dir/volumes and masks to input_dir/gt."""
    settings = settings or SynthSettings()
    vol_dir = os.path.join(input_dir, "volumes")
    gt_dir = os.path.join(input_dir, "gt")
    os.makedirs(vol_dir, exist_ok=True)
    os.makedirs(gt_dir, exist_ok=True)
    ids = []
    for idx in range(count):
        vid = f"vol{idx:03d}"
        volume, gt = generate_volume(vid, seed, settings)
        tensorio.write_tensor(
            os.path.join(vol_dir, f"{vid}.tns"), volume.voxels, spacing=volume.spacing,
            tensor_id=vid,
        )
        tensorio.write_tensor(
            os.path.join(gt_dir, f"{vid}.tns"), gt, spacing=volume.spacing, tensor_id=vid
        )
        ids.append(vid)
    return ids


def corrupt_mask(mask: np.ndarray, brain: np.ndarray, seed: int,
                 fragments: int = 8) -> np.ndarray:
    """Deliberately break a pseudo-label for filter-validation experiments.

    The mask is replaced by small ellipsoid fragments scattered across the
    brain, mostly away from the original region. Fragmented masks in plain
    tissue are maximally inconsistent under re-prompted segmentation: each
    slice re-prompts only its largest fragment and the regrown output bears
    little relation to the scatter.
    """
    rng = rng_for(seed, "corrupt")
    src = np.asarray(mask).astype(bool)
    brain_bits = np.asarray(brain).astype(bool)
    shape = src.shape
    candidates = np.argwhere(brain_bits & ~src)
    if candidates.size == 0:
        candidates = np.argwhere(brain_bits)
    out = np.zeros(shape, dtype=bool)
    if candidates.size == 0:
        return out.astype(np.uint8)
    for _ in range(fragments):
        center = candidates[int(rng.integers(0, len(candidates)))]
        radii = rng.integers(2, 5, size=3).astype(np.float64)
        out |= _ellipsoid(shape, center.astype(np.float64), radii)
    out &= brain_bits
    return out.astype(np.uint8)
