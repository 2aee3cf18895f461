"""Similarity-based filtering of the self-training pool.

Each pool entry carries a quality score F: the Dice agreement between a
volume's current pseudo-label and the promptable segmenter's output when
re-prompted from that same pseudo-label. Filtering keeps entries scoring
strictly above the nearest-rank beta-th percentile of all F values, with two
documented carve-outs: beta = 0 keeps everything, and a cut that would keep
nothing (all scores tied at the threshold) also keeps everything, since
filtering a pool with no score signal only shrinks the training set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from . import metrics
from .errors import ContractError, EmptyPoolError
from .percentile import nearest_rank

STAGE_LABELED = "D1"
STAGE_AUGMENTED = "D2"
STAGE_PSEUDO = "D3"
STAGE_FILTERED = "D4"


@dataclass(frozen=True)
class PoolEntry:
    volume_id: str
    volume_ref: str = ""
    label_ref: str = ""
    score: float | None = None
    retained: bool = True


@dataclass
class TrainingPool:
    entries: list[PoolEntry] = field(default_factory=list)
    stage: str = STAGE_PSEUDO


def score(mask, reprompted_mask) -> float:
    """Volume Dice between a pseudo-label and its re-prompted counterpart.

    Two empty masks agree perfectly and score 1.0.
    """
    return metrics.dsc(mask, reprompted_mask)


def filter_pool(pool: TrainingPool, beta) -> TrainingPool:
    """Retention pass over a fully scored pool; returns the filtered pool.

    Scores and references are copied unchanged; only retention flags and the
    stage tag differ in the result.
    """
    if not pool.entries:
        raise EmptyPoolError("cannot filter an empty pool")
    if not (0 <= beta < 100):
        raise ContractError(f"beta {beta!r} outside [0, 100)")
    scores = []
    for entry in pool.entries:
        if entry.score is None:
            raise ContractError(f"entry {entry.volume_id} is not scored")
        scores.append(float(entry.score))
    if beta <= 0:
        flags = [True] * len(scores)
    else:
        cut = nearest_rank(scores, beta)
        flags = [s > cut for s in scores]
        if not any(flags):
            flags = [True] * len(scores)
    entries = [replace(e, retained=f) for e, f in zip(pool.entries, flags)]
    return TrainingPool(entries=entries, stage=STAGE_FILTERED)


def write_manifest(path, pool: TrainingPool) -> None:
    """Persist the pool as JSON lines, one record per entry."""
    lines = []
    for e in pool.entries:
        lines.append(
            json.dumps(
                {
                    "volume_id": e.volume_id,
                    "volume": e.volume_ref,
                    "ref": e.label_ref,
                    "F": e.score,
                    "retained": bool(e.retained),
                    "stage": pool.stage,
                },
                sort_keys=True,
                separators=(",", ":"),
            )
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_manifest(path) -> TrainingPool:
    entries = []
    stage = STAGE_PSEUDO
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            stage = obj.get("stage", stage)
            entries.append(
                PoolEntry(
                    volume_id=obj["volume_id"],
                    volume_ref=obj.get("volume", ""),
                    label_ref=obj.get("ref", ""),
                    score=obj.get("F"),
                    retained=bool(obj.get("retained", True)),
                )
            )
    return TrainingPool(entries=entries, stage=stage)
