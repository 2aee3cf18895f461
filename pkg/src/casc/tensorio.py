"""Neutral tensor file format shared by every stage and the backend wire.

Layout: 8-byte magic ``CASCTNSR``, one UTF-8 JSON header line terminated by
``\\n`` with fields ``{dtype, shape, spacing?, id?}``, then the raw payload in
row-major order, little-endian. ``dtype`` is ``"f32"`` or ``"u8"``. Encoding
is canonical (sorted keys, no whitespace) so identical tensors serialize to
identical bytes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

MAGIC = b"CASCTNSR"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_MAX_HEADER = 1 << 16


@dataclass
class TensorRecord:
    array: np.ndarray
    spacing: tuple[float, ...] | None = None
    id: str | None = None

    def nbytes(self) -> int:
        return self.array.nbytes


def _wire_dtype(arr: np.ndarray) -> str:
    if arr.dtype == np.uint8 or arr.dtype == np.bool_:
        return "u8"
    if arr.dtype.kind in "fiu":
        return "f32"
    raise ShapeError(f"unsupported tensor dtype {arr.dtype}")


def pack_tensor(array: np.ndarray, spacing=None, tensor_id=None) -> bytes:
    """Serialize one array (with optional spacing/id metadata) to bytes."""
    arr = np.asarray(array)
    kind = _wire_dtype(arr)
    arr = np.ascontiguousarray(arr.astype(_DTYPES[kind], copy=False))
    header = {"dtype": kind, "shape": list(arr.shape)}
    if spacing is not None:
        header["spacing"] = [float(s) for s in spacing]
    if tensor_id is not None:
        header["id"] = str(tensor_id)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + head + b"\n" + arr.tobytes(order="C")


def unpack_tensor(buffer: bytes, offset: int = 0) -> tuple[TensorRecord, int]:
    """Parse one tensor starting at ``offset``; returns (record, next_offset)."""
    if buffer[offset : offset + len(MAGIC)] != MAGIC:
        raise ShapeError("bad tensor magic")
    start = offset + len(MAGIC)
    end = buffer.find(b"\n", start, start + _MAX_HEADER)
    if end < 0:
        raise ShapeError("unterminated tensor header")
    try:
        header = json.loads(buffer[start:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ShapeError(f"bad tensor header: {exc}") from exc
    kind = header.get("dtype")
    if kind not in _DTYPES:
        raise ShapeError(f"unknown tensor dtype {kind!r}")
    shape = tuple(int(s) for s in header.get("shape", []))
    dtype = _DTYPES[kind]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
    if shape == ():
        nbytes = dtype.itemsize
    body_start = end + 1
    body_end = body_start + nbytes
    if body_end > len(buffer):
        raise ShapeError("tensor payload truncated")
    arr = np.frombuffer(buffer[body_start:body_end], dtype=dtype).reshape(shape).copy()
    spacing = header.get("spacing")
    record = TensorRecord(
        array=arr,
        spacing=tuple(float(s) for s in spacing) if spacing is not None else None,
        id=header.get("id"),
    )
    return record, body_end


def unpack_all(buffer: bytes, offset: int = 0) -> list[TensorRecord]:
    """Parse consecutive tensors until the buffer is exhausted."""
    records = []
    while offset < len(buffer):
        record, offset = unpack_tensor(buffer, offset)
        records.append(record)
    return records


def write_tensor(path, array, spacing=None, tensor_id=None) -> None:
    """Write one tensor file atomically (tmp file + rename)."""
    data = pack_tensor(array, spacing=spacing, tensor_id=tensor_id)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_tensor(path) -> TensorRecord:
    with open(path, "rb") as fh:
        data = fh.read()
    record, end = unpack_tensor(data)
    if end != len(data):
        raise ShapeError(f"trailing bytes in tensor file {path}")
    return record
