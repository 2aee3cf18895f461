"""Volume overlap and surface-distance metrics, size stratification, and
report assembly.

Dice is the plain set formula 2|A∩B| / (|A|+|B|). The 95th-percentile
Hausdorff distance is the nearest-rank 95th percentile of the symmetric pool
of surface-to-surface distances: for every surface voxel of one mask, the
Euclidean distance (anisotropic spacing in mm) to the nearest surface voxel
of the other, both directions pooled together. A surface voxel is a set voxel
with at least one face-adjacent (6-connectivity) unset or out-of-bounds
neighbor. Aggregates use population standard deviation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ShapeError
from .percentile import nearest_rank
from .volume import as_mask

SIZE_GROUPS = ("tiny", "small", "medium", "large", "huge")


def _check_pair(a, b):
    a8 = as_mask(a)
    b8 = as_mask(b)
    if a8.shape != b8.shape:
        raise ShapeError(f"mask shapes differ: {a8.shape} vs {b8.shape}")
    return a8.astype(bool), b8.astype(bool)


def dsc(a, b) -> float:
    """Dice overlap; both-empty pairs score 1.0, one-empty pairs 0.0."""
    abool, bbool = _check_pair(a, b)
    na = int(abool.sum())
    nb = int(bbool.sum())
    if na == 0 and nb == 0:
        return 1.0
    inter = int((abool & bbool).sum())
    return 2.0 * inter / (na + nb)


def surface_mask(mask) -> np.ndarray:
    """Set voxels with a face-adjacent unset or out-of-bounds neighbor."""
    bits = as_mask(mask).astype(bool)
    if bits.ndim != 3:
        raise ShapeError("surface extraction expects a 3D mask")
    padded = np.pad(bits, 1, mode="constant", constant_values=False)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        interior &= padded[tuple(lo)]
        interior &= padded[tuple(hi)]
    return (bits & ~interior).astype(np.uint8)


def volume_diagonal_mm(shape, spacing) -> float:
    return math.sqrt(sum((n * s) ** 2 for n, s in zip(shape, spacing)))


def hd95(a, b, spacing=(1.0, 1.0, 1.0), penalty=None) -> float:
    """95th-percentile symmetric surface distance in mm.

    Both masks empty gives 0.0; exactly one empty gives ``penalty``
    (defaulting to the volume diagonal in mm).
    """
    abool, bbool = _check_pair(a, b)
    spacing = tuple(float(s) for s in spacing)
    empty_a = not abool.any()
    empty_b = not bbool.any()
    if empty_a and empty_b:
        return 0.0
    if empty_a or empty_b:
        return float(penalty) if penalty is not None else volume_diagonal_mm(abool.shape, spacing)
    pts_a = np.argwhere(surface_mask(abool)) * np.asarray(spacing)
    pts_b = np.argwhere(surface_mask(bbool)) * np.asarray(spacing)
    d_ab, _ = cKDTree(pts_b).query(pts_a, k=1)
    d_ba, _ = cKDTree(pts_a).query(pts_b, k=1)
    return nearest_rank(np.concatenate([d_ab, d_ba]), 95)


def size_strata(gt_sizes) -> list[str]:
    """Quintile group per volume by target size, nearest-rank boundaries at
    the 20/40/60/80 percentiles, ties going to the lower group."""
    sizes = [int(s) for s in gt_sizes]
    if not sizes:
        raise ShapeError("size stratification needs at least one volume")
    cuts = [nearest_rank(sizes, p) for p in (20, 40, 60, 80)]
    groups = []
    for s in sizes:
        idx = 0
        while idx < 4 and s > cuts[idx]:
            idx += 1
        groups.append(SIZE_GROUPS[idx])
    return groups


@dataclass
class VolumeMetrics:
    volume_id: str
    dsc: float
    hd95_mm: float
    gt_size_voxels: int
    size_group: str = ""


@dataclass
class MetricsReport:
    per_volume: list[VolumeMetrics]
    aggregate: dict = field(default_factory=dict)

    def to_json_obj(self) -> dict:
        return {
            "per_volume": [
                {
                    "volume_id": m.volume_id,
                    "dsc": m.dsc,
                    "hd95_mm": m.hd95_mm,
                    "gt_size_voxels": m.gt_size_voxels,
                    "size_group": m.size_group,
                }
                for m in self.per_volume
            ],
            "aggregate": self.aggregate,
        }


def _mean_std(values) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


def evaluate(predictions, ground_truths, spacing=(1.0, 1.0, 1.0), penalty=None) -> MetricsReport:
    """Per-volume Dice/HD95 plus size-quintile groups and aggregates.

    ``predictions`` and ``ground_truths`` map volume id to Mask3D and must
    cover the same ids. ``spacing`` is either one (dz, dy, dx) triple or a
    mapping from volume id to triples.
    """
    pred_ids = set(predictions)
    gt_ids = set(ground_truths)
    if pred_ids != gt_ids:
        missing = sorted(gt_ids - pred_ids)
        extra = sorted(pred_ids - gt_ids)
        raise ShapeError(
            f"prediction/ground-truth ids differ: missing={missing} extra={extra}"
        )
    if not pred_ids:
        raise ShapeError("evaluate needs at least one volume")
    ids = sorted(pred_ids)

    def spacing_for(vid):
        if isinstance(spacing, dict):
            return spacing[vid]
        return spacing

    rows = []
    for vid in ids:
        gt = ground_truths[vid]
        rows.append(
            VolumeMetrics(
                volume_id=vid,
                dsc=dsc(predictions[vid], gt),
                hd95_mm=hd95(predictions[vid], gt, spacing_for(vid), penalty=penalty),
                gt_size_voxels=int(as_mask(gt).sum()),
            )
        )
    groups = size_strata([m.gt_size_voxels for m in rows])
    for m, g in zip(rows, groups):
        m.size_group = g
    aggregate = {
        "overall": {
            "dsc": _mean_std([m.dsc for m in rows]),
            "hd95_mm": _mean_std([m.hd95_mm for m in rows]),
        },
        "by_group": {},
    }
    for g in SIZE_GROUPS:
        members = [m for m in rows if m.size_group == g]
        aggregate["by_group"][g] = {
            "dsc": _mean_std([m.dsc for m in members]),
            "hd95_mm": _mean_std([m.hd95_mm for m in members]),
        }
    return MetricsReport(per_volume=rows, aggregate=aggregate)


def _fmt(stats: dict, scale=1.0) -> str:
    if stats["n"] == 0:
        return "-"
    return f"{stats['mean'] * scale:.2f}±{stats['std'] * scale:.2f}"


def report_table(report: MetricsReport, label="casc") -> str:
    """Aligned text table: overall DSC/HD95 plus DSC per size group."""
    header = ["method", "DSC(%)", "HD95(mm)"] + [g for g in SIZE_GROUPS]
    agg = report.aggregate
    row = [
        label,
        _fmt(agg["overall"]["dsc"], scale=100.0),
        _fmt(agg["overall"]["hd95_mm"]),
    ] + [_fmt(agg["by_group"][g]["dsc"], scale=100.0) for g in SIZE_GROUPS]
    widths = [max(len(h), len(v)) for h, v in zip(header, row)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(header, widths)),
        "  ".join(v.ljust(w) for v, w in zip(row, widths)),
    ]
    return "\n".join(lines) + "\n"
