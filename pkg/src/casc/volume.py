"""Volume data model: brain-area normalization and axial slice handling.

Axis convention: voxels are indexed (depth, height, width) and axis 0 is the
axial direction, so slice d is ``voxels[d, :, :]``. Spacing is (dz, dy, dx)
in mm per voxel. Masks are uint8 grids of {0, 1} with the same shape as their
source.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .errors import ShapeError

DEFAULT_SPACING = (1.0, 1.0, 1.0)


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = DEFAULT_SPACING
    id: str = ""

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ShapeError(f"volume shape must be 3D and nonempty, got {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ShapeError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


def as_mask(bits: np.ndarray) -> np.ndarray:
    """Coerce an array to a uint8 {0,1} mask."""
    arr = np.asarray(bits)
    if arr.dtype == np.bool_:
        return arr.astype(np.uint8)
    arr = arr.astype(np.uint8, copy=False)
    if arr.size and arr.max() > 1:
        raise ShapeError("mask values must be 0 or 1")
    return arr


def brain_mask(volume: Volume) -> np.ndarray:
    """Mask of voxels with nonzero original intensity."""
    return (volume.voxels != 0).astype(np.uint8)


def normalize_brain(volume: Volume) -> Volume:
    """Standardize brain voxels to zero mean, unit std; background stays 0.

    Statistics are population moments over nonzero voxels of this volume.
    If the brain std is below 1e-8 the brain voxels are set to 0.
    """
    vox = volume.voxels.astype(np.float64)
    brain = vox != 0
    out = np.zeros_like(vox)
    if brain.any():
        values = vox[brain]
        mu = values.mean()
        sigma = values.std()
        if sigma >= 1e-8:
            out[brain] = (values - mu) / sigma
        # degenerate std: brain voxels stay 0
    return Volume(out.astype(np.float32), spacing=volume.spacing, id=volume.id)


def extract_slices(volume: Volume) -> list[np.ndarray]:
    """Axial slices in index order; stack_slices is the exact inverse."""
    return [volume.voxels[d] for d in range(volume.shape[0])]


def stack_slices(slices, spacing=DEFAULT_SPACING, volume_id="") -> Volume:
    if not slices:
        raise ShapeError("cannot stack zero slices")
    return Volume(np.stack(slices, axis=0), spacing=spacing, id=volume_id)


def save_volume(path, volume: Volume) -> None:
    tensorio.write_tensor(path, volume.voxels, spacing=volume.spacing, tensor_id=volume.id)


def load_volume(path) -> Volume:
    record = tensorio.read_tensor(path)
    if record.array.ndim != 3:
        raise ShapeError(f"{path} does not hold a 3D volume")
    spacing = record.spacing if record.spacing is not None else DEFAULT_SPACING
    return Volume(record.array.astype(np.float32), spacing=spacing, id=record.id or "")


@dataclass
class PreparedVolume:
    """A normalized volume plus the brain mask of its original intensities.

    The mask is computed before normalization and carried alongside, because
    voxels normalized exactly to 0 would otherwise drop out of the mask.
    """

    volume: Volume
    brain: np.ndarray = field(repr=False)


def prepare(volume: Volume) -> PreparedVolume:
    return PreparedVolume(volume=normalize_brain(volume), brain=brain_mask(volume))


def load_prepared(path) -> PreparedVolume:
    return prepare(load_volume(path))
