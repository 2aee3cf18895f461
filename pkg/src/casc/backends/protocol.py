"""Length-prefixed frame protocol for external backend processes.

A frame is a 4-byte little-endian body length followed by the body: one JSON
header line terminated by ``\\n``, then zero or more tensor-format payloads
packed back to back. Request headers carry ``{op, request_id, params...}``;
responses echo ``request_id`` and carry either ``result`` or
``error: {code, message}``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

from ..errors import ProtocolError

MAX_FRAME = 1 << 30


@dataclass
class Frame:
    header: dict
    payload: bytes = b""
    raw: bytes = field(default=b"", repr=False)  # full frame bytes incl. length prefix


def encode_frame(header: dict, payloads=()) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = head + b"\n" + b"".join(payloads)
    if len(body) > MAX_FRAME:
        raise ProtocolError(f"frame body of {len(body)} bytes exceeds limit")
    return struct.pack("<I", len(body)) + body


def decode_body(body: bytes, raw: bytes = b"") -> Frame:
    nl = body.find(b"\n")
    if nl < 0:
        raise ProtocolError("frame header line is not newline-terminated")
    try:
        header = json.loads(body[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"frame header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ProtocolError("frame header must be a JSON object")
    return Frame(header=header, payload=body[nl + 1 :], raw=raw)


def read_exact(stream, n: int) -> bytes | None:
    """Read exactly n bytes; None on clean EOF at the first byte."""
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = stream.read(remaining)
        if not chunk:
            if remaining == n:
                return None
            raise ProtocolError(f"stream ended mid-frame ({n - remaining}/{n} bytes)")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_raw_frame(stream) -> bytes | None:
    """Read one frame's full bytes (prefix included); None on clean EOF."""
    prefix = read_exact(stream, 4)
    if prefix is None:
        return None
    (length,) = struct.unpack("<I", prefix)
    if length > MAX_FRAME:
        raise ProtocolError(f"declared frame length {length} exceeds limit")
    body = read_exact(stream, length)
    if body is None:
        raise ProtocolError("stream ended before frame body")
    return prefix + body


def read_frame(stream) -> Frame | None:
    raw = read_raw_frame(stream)
    if raw is None:
        return None
    return decode_body(raw[4:], raw=raw)


def write_frame(stream, header: dict, payloads=()) -> bytes:
    data = encode_frame(header, payloads)
    stream.write(data)
    stream.flush()
    return data
