"""Golden-transcript conformance suite for protocol backends.

A transcript is a JSON-lines file of deterministic request frames with
expectations. Structural checks (framing, payload shapes, error-frame
behavior, in-run determinism) apply to any adapter; strict mode additionally
requires byte-identical responses and is meant for replaying against the
backend that generated the transcript.
"""

from __future__ import annotations

import base64
import json
import subprocess
from dataclasses import dataclass

import numpy as np

from ..errors import ProtocolError
from ..prompting import PromptSet
from ..tensorio import pack_tensor, unpack_all
from . import protocol
from .analytic import AnalyticBackend
from .base import (
    CAP_EMBED_IMAGE,
    CAP_EMBED_TEXT,
    CAP_GRADIENT_MAPS,
    CAP_SEGMENT_PROMPTED,
)
from .serve import BackendServer


@dataclass
class TranscriptEntry:
    name: str
    request: bytes
    expect: dict
    golden: bytes | None = None


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


def _test_slice() -> np.ndarray:
    rng = np.random.default_rng(123)
    img = rng.normal(0.0, 1.0, size=(24, 24)).astype(np.float32)
    img[img == 0] = 0.001
    img[8:14, 9:16] = 4.0
    img[:2] = 0.0  # background margin
    return img


def _entries() -> list[TranscriptEntry]:
    img = _test_slice()
    prompts = PromptSet(
        box=(8, 9, 13, 15),
        points=(
            ((10, 12), "fg"),
            ((8, 9), "bg"),
            ((8, 15), "bg"),
            ((13, 9), "bg"),
            ((13, 15), "bg"),
        ),
    )
    echo_payloads = (
        pack_tensor(np.arange(24, dtype=np.float32).reshape(2, 3, 4), spacing=(1, 1, 2),
                    tensor_id="echo-probe"),
        pack_tensor((np.arange(12, dtype=np.uint8) % 2).reshape(3, 4)),
    )
    entries = [
        TranscriptEntry(
            "describe",
            protocol.encode_frame({"op": "describe", "request_id": 1}),
            {
                "kind": "describe",
                "capabilities": sorted(
                    [CAP_EMBED_IMAGE, CAP_EMBED_TEXT, CAP_GRADIENT_MAPS, CAP_SEGMENT_PROMPTED]
                ),
            },
        ),
        TranscriptEntry(
            "echo_roundtrip",
            protocol.encode_frame({"op": "echo", "request_id": 2}, echo_payloads),
            {"kind": "echo"},
        ),
        TranscriptEntry(
            "embed_text_a",
            protocol.encode_frame(
                {"op": "embed_text", "request_id": 3, "params": {"text": "healthy tissue"}}
            ),
            {"kind": "tensors", "tensors": [{"dtype": "f32", "ndim": 1}]},
        ),
        TranscriptEntry(
            "embed_image",
            protocol.encode_frame({"op": "embed_image", "request_id": 4}, (pack_tensor(img),)),
            {"kind": "tensors", "tensors": [{"dtype": "f32", "ndim": 1}]},
        ),
        TranscriptEntry(
            "embed_image_repeat",
            protocol.encode_frame({"op": "embed_image", "request_id": 5}, (pack_tensor(img),)),
            {
                "kind": "tensors",
                "tensors": [{"dtype": "f32", "ndim": 1}],
                "payload_matches": "embed_image",
            },
        ),
        TranscriptEntry(
            "gradient_maps",
            protocol.encode_frame({"op": "gradient_maps", "request_id": 6}, (pack_tensor(img),)),
            {"kind": "gradient_maps", "slice_shape": [24, 24]},
        ),
        TranscriptEntry(
            "segment_prompted",
            protocol.encode_frame(
                {
                    "op": "segment_prompted",
                    "request_id": 7,
                    "params": {"prompts": prompts.to_json_obj()},
                },
                (pack_tensor(img),),
            ),
            {"kind": "mask", "slice_shape": [24, 24], "box": [8, 9, 13, 15]},
        ),
        TranscriptEntry(
            "undeclared_capability",
            protocol.encode_frame({"op": "bogus_op", "request_id": 8}),
            {"kind": "error", "code": "unsupported_capability"},
        ),
        TranscriptEntry(
            "malformed_header",
            len(b"not json\n").to_bytes(4, "little") + b"not json\n",
            {"kind": "error"},
        ),
        TranscriptEntry(
            "usable_after_malformed",
            protocol.encode_frame({"op": "echo", "request_id": 9}, (echo_payloads[0],)),
            {"kind": "echo"},
        ),
    ]
    return entries


def generate_transcript(path) -> list[TranscriptEntry]:
    """Build the deterministic entries, record analytic golden responses, and
    write the transcript file."""
    server = BackendServer(AnalyticBackend())
    entries = _entries()
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            entry.golden = server.handle_body(entry.request[4:])
            fh.write(
                json.dumps(
                    {
                        "name": entry.name,
                        "request_b64": base64.b64encode(entry.request).decode("ascii"),
                        "expect": entry.expect,
                        "golden_b64": base64.b64encode(entry.golden).decode("ascii"),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    return entries


def load_transcript(path) -> list[TranscriptEntry]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            entries.append(
                TranscriptEntry(
                    name=obj["name"],
                    request=base64.b64decode(obj["request_b64"]),
                    expect=obj["expect"],
                    golden=base64.b64decode(obj["golden_b64"]) if obj.get("golden_b64") else None,
                )
            )
    return entries


class InProcessTransport:
    def __init__(self, server: BackendServer):
        self.server = server

    def roundtrip(self, request: bytes) -> bytes:
        body = self.server.handle_body(request[4:])
        return body

    def close(self):
        pass


class SubprocessTransport:
    def __init__(self, cmd):
        self.proc = subprocess.Popen(list(cmd), stdin=subprocess.PIPE, stdout=subprocess.PIPE)

    def roundtrip(self, request: bytes) -> bytes:
        self.proc.stdin.write(request)
        self.proc.stdin.flush()
        raw = protocol.read_raw_frame(self.proc.stdout)
        if raw is None:
            raise ProtocolError("backend closed the stream during conformance")
        return raw

    def close(self):
        try:
            self.proc.stdin.close()
            self.proc.wait(timeout=10)
        except Exception:
            self.proc.kill()


def _frame_of(response: bytes) -> protocol.Frame:
    """Responses and requests are full frames: length prefix plus body."""
    if len(response) < 4 or int.from_bytes(response[:4], "little") != len(response) - 4:
        raise ProtocolError("frame length prefix does not match body size")
    return protocol.decode_body(response[4:], raw=response)


def _check_entry(entry: TranscriptEntry, response: bytes, responses: dict,
                 strict: bool) -> CheckResult:
    expect = entry.expect
    try:
        frame = _frame_of(response)
    except ProtocolError as exc:
        return CheckResult(entry.name, False, f"unparseable response: {exc}")
    kind = expect.get("kind")
    error = frame.header.get("error")
    if kind == "error":
        if not error:
            return CheckResult(entry.name, False, "expected an error frame")
        if "code" in expect and error.get("code") != expect["code"]:
            return CheckResult(
                entry.name, False, f"error code {error.get('code')!r} != {expect['code']!r}"
            )
        return CheckResult(entry.name, True)
    if error:
        return CheckResult(entry.name, False, f"unexpected error frame: {error}")
    if strict and entry.golden is not None and response != entry.golden:
        return CheckResult(entry.name, False, "response bytes differ from golden")
    if kind == "describe":
        result = frame.header.get("result", {})
        for key in ("kind", "capabilities", "layer_ids"):
            if key not in result:
                return CheckResult(entry.name, False, f"describe result missing {key!r}")
        missing = set(expect.get("capabilities", [])) - set(result["capabilities"])
        if missing:
            return CheckResult(entry.name, False, f"undeclared capabilities: {sorted(missing)}")
        return CheckResult(entry.name, True)
    if kind == "echo":
        request_frame = _frame_of(entry.request)
        if frame.payload != request_frame.payload:
            return CheckResult(entry.name, False, "echo payload bytes differ from request")
        return CheckResult(entry.name, True)
    if kind in ("tensors", "gradient_maps", "mask"):
        try:
            records = unpack_all(frame.payload)
        except Exception as exc:
            return CheckResult(entry.name, False, f"bad payload tensors: {exc}")
        if kind == "tensors":
            specs = expect.get("tensors", [])
            if len(records) != len(specs):
                return CheckResult(
                    entry.name, False, f"{len(records)} payload tensors, expected {len(specs)}"
                )
            for spec, record in zip(specs, records):
                if spec.get("dtype") == "f32" and record.array.dtype != np.float32:
                    return CheckResult(entry.name, False, f"dtype {record.array.dtype} != f32")
                if spec.get("dtype") == "u8" and record.array.dtype != np.uint8:
                    return CheckResult(entry.name, False, f"dtype {record.array.dtype} != u8")
                if "ndim" in spec and record.array.ndim != spec["ndim"]:
                    return CheckResult(entry.name, False, f"ndim {record.array.ndim} != {spec['ndim']}")
                if "shape" in spec and list(record.array.shape) != list(spec["shape"]):
                    return CheckResult(entry.name, False, f"shape {record.array.shape} != {spec['shape']}")
            match = expect.get("payload_matches")
            if match is not None:
                other = responses.get(match)
                if other is None:
                    return CheckResult(entry.name, False, f"no earlier response {match!r}")
                if _frame_of(other).payload != frame.payload:
                    return CheckResult(entry.name, False, "determinism check failed: payloads differ")
            return CheckResult(entry.name, True)
        if kind == "gradient_maps":
            result = frame.header.get("result", {})
            layer_ids = result.get("layer_ids")
            if not layer_ids:
                return CheckResult(entry.name, False, "no layer_ids in result")
            prob = result.get("probability")
            if not isinstance(prob, (int, float)) or not (0.0 <= float(prob) <= 1.0):
                return CheckResult(entry.name, False, f"bad probability {prob!r}")
            expected_n = len(layer_ids) * (2 if result.get("activations") else 1)
            if len(records) != expected_n:
                return CheckResult(
                    entry.name, False, f"{len(records)} payloads for {len(layer_ids)} layers"
                )
            hw = tuple(expect["slice_shape"])
            for record in records:
                if record.array.ndim != 3 or record.array.shape[1:] != hw:
                    return CheckResult(
                        entry.name, False, f"gradient grid shape {record.array.shape} != (k, {hw})"
                    )
            return CheckResult(entry.name, True)
        # mask
        if len(records) != 1:
            return CheckResult(entry.name, False, f"{len(records)} payloads, expected 1 mask")
        mask = records[0].array
        if mask.dtype != np.uint8 or list(mask.shape) != list(expect["slice_shape"]):
            return CheckResult(entry.name, False, f"bad mask dtype/shape {mask.dtype} {mask.shape}")
        if mask.size and mask.max() > 1:
            return CheckResult(entry.name, False, "mask values outside {0,1}")
        box = expect.get("box")
        if box is not None and mask.any():
            rr, cc = np.nonzero(mask)
            if rr.min() < box[0] or cc.min() < box[1] or rr.max() > box[2] or cc.max() > box[3]:
                return CheckResult(entry.name, False, "mask pixels escape the prompt box")
        return CheckResult(entry.name, True)
    return CheckResult(entry.name, False, f"unknown expectation kind {kind!r}")


def run_conformance(transport, entries, strict: bool = False) -> list[CheckResult]:
    responses: dict[str, bytes] = {}
    results = []
    for entry in entries:
        try:
            response = transport.roundtrip(entry.request)
        except Exception as exc:
            results.append(CheckResult(entry.name, False, f"transport failure: {exc}"))
            continue
        responses[entry.name] = response
        results.append(_check_entry(entry, response, responses, strict))
    return results
