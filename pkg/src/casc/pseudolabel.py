"""Slice-wise segmenter driving and 3D pseudo-label assembly.

Per-slice masks from the promptable segmenter are stacked into a volume mask.
Slices labeled negative become zero planes; positive slices carry the
segmenter output. Every plane records where it came from so downstream audits
can re-derive the construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import labeling, prompting, tensorio
from .errors import BackendError, NoRoiError, ShapeError
from .volume import Volume, as_mask

SOURCE_CAM_SAM = "cam_sam"
SOURCE_SELF_TRAIN = "self_train_round1"
SOURCE_RESEG = "sam_reseg"

ORIGIN_EMPTY_BY_LABEL = "empty_by_label"
ORIGIN_SEGMENTED = "segmented"
ORIGIN_FALLBACK_EMPTY = "fallback_empty"


@dataclass
class PseudoLabel:
    mask: np.ndarray
    source: str
    per_slice_origin: tuple[str, ...]

    def save(self, path, spacing=(1.0, 1.0, 1.0), volume_id="") -> None:
        tensorio.write_tensor(path, self.mask, spacing=spacing, tensor_id=volume_id)
        sidecar = {"source": self.source, "per_slice_origin": list(self.per_slice_origin)}
        with open(f"{path}.origins.json", "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, sort_keys=True, separators=(",", ":"))

    @classmethod
    def load(cls, path) -> "PseudoLabel":
        record = tensorio.read_tensor(path)
        with open(f"{path}.origins.json", "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
        return cls(
            mask=as_mask(record.array),
            source=sidecar["source"],
            per_slice_origin=tuple(sidecar["per_slice_origin"]),
        )


def assemble(volume: Volume, slice_labels, slice_masks, source=SOURCE_CAM_SAM) -> PseudoLabel:
    """Stack per-slice masks into a 3D pseudo-label.

    ``slice_labels`` has one binary label per axial slice. ``slice_masks``
    maps the index of every label-1 slice to its 2D mask, or to None when no
    mask could be produced; label-0 slices become zero planes.
    """
    depth, height, width = volume.shape
    labels = [int(v) for v in slice_labels]
    if len(labels) != depth:
        raise ShapeError(f"{len(labels)} labels for {depth} slices")
    positive = {d for d, y in enumerate(labels) if y == 1}
    provided = set(slice_masks)
    if provided != positive:
        raise ShapeError(
            f"slice masks must cover exactly the positive slices; "
            f"missing={sorted(positive - provided)} extra={sorted(provided - positive)}"
        )
    mask = np.zeros((depth, height, width), dtype=np.uint8)
    origins = []
    for d in range(depth):
        if labels[d] == 0:
            origins.append(ORIGIN_EMPTY_BY_LABEL)
            continue
        plane = slice_masks[d]
        if plane is None:
            origins.append(ORIGIN_FALLBACK_EMPTY)
            continue
        plane = as_mask(plane)
        if plane.shape != (height, width):
            raise ShapeError(f"slice {d} mask shape {plane.shape} != {(height, width)}")
        if plane.any():
            mask[d] = plane
            origins.append(ORIGIN_SEGMENTED)
        else:
            origins.append(ORIGIN_FALLBACK_EMPTY)
    return PseudoLabel(mask=mask, source=source, per_slice_origin=tuple(origins))


def _segment_slice(backend, image, prompts, slice_index):
    try:
        return backend.segment_prompted(image, prompts)
    except BackendError as exc:
        exc.context.setdefault("slice_index", slice_index)
        raise


def segment_from_cams(volume: Volume, brain3d, slice_labels, cams, backend, alpha,
                      box_padding: int = 0) -> PseudoLabel:
    """Pseudo-label a volume from per-slice activation maps.

    For each positive slice the thresholded map's largest component drives
    the prompts. If thresholding leaves nothing, a fixed 9x9 box around the
    map's argmax over brain pixels is used instead, so the slice keeps its
    positive label rather than being silently dropped.
    """
    labels = [int(v) for v in slice_labels]
    brain3d = as_mask(brain3d)
    masks = {}
    for d, y in enumerate(labels):
        if y != 1:
            continue
        image = volume.voxels[d]
        brain = brain3d[d]
        cam = cams[d]
        prompts = None
        thresholded = labeling.threshold_mask(cam, alpha, brain)
        roi = prompting.extract_roi(thresholded)
        if roi.any():
            prompts = prompting.build_prompts(roi, pad=box_padding)
        elif brain.any():
            values = np.where(brain.astype(bool), np.asarray(cam.values, dtype=np.float64), -np.inf)
            peak = np.unravel_index(int(values.argmax()), values.shape)
            prompts = prompting.point_box_prompts(peak, image.shape)
        if prompts is None:
            masks[d] = None
        else:
            masks[d] = _segment_slice(backend, image, prompts, d)
    return assemble(volume, labels, masks, source=SOURCE_CAM_SAM)


def resegment_via_prompts(volume: Volume, prediction, backend) -> PseudoLabel:
    """Re-run the promptable segmenter with prompts derived from an existing
    3D prediction; empty-prediction slices yield empty planes without a call.
    """
    pred = as_mask(prediction)
    if pred.shape != volume.shape:
        raise ShapeError(f"prediction {pred.shape} does not match volume {volume.shape}")
    labels = [1 if pred[d].any() else 0 for d in range(volume.shape[0])]
    masks = {}
    for d, y in enumerate(labels):
        if y != 1:
            continue
        roi = prompting.extract_roi(pred[d])
        try:
            prompts = prompting.build_prompts(roi)
        except NoRoiError:
            masks[d] = None
            continue
        masks[d] = _segment_slice(backend, volume.voxels[d], prompts, d)
    result = assemble(volume, labels, masks, source=SOURCE_RESEG)
    return result
