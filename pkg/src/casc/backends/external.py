"""Client side of the frame protocol: run another process's models behind the
standard backend interface.

Each connection carries one request at a time; a small connection pool
provides parallelism when the engine dispatches concurrent work.
"""

from __future__ import annotations

import socket
import subprocess
import threading

import numpy as np

from ..errors import BackendError, CapabilityError, ProtocolError, StateError
from ..prompting import PromptSet
from ..tensorio import pack_tensor, unpack_all
from . import protocol
from .base import Backend, BackendDescriptor

_ERROR_TYPES = {
    "unsupported_capability": CapabilityError,
    "state_error": StateError,
}


class _Connection:
    def __init__(self, cmd=None, address=None):
        self.lock = threading.Lock()
        self.proc = None
        self.sock = None
        if cmd is not None:
            self.proc = subprocess.Popen(cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
            self.reader = self.proc.stdout
            self.writer = self.proc.stdin
        elif address is not None:
            host, port = address
            self.sock = socket.create_connection((host, port))
            self.reader = self.sock.makefile("rb")
            self.writer = self.sock.makefile("wb")
        else:
            raise ValueError("either cmd or address is required")

    def roundtrip(self, header: dict, payloads=()) -> protocol.Frame:
        with self.lock:
            protocol.write_frame(self.writer, header, payloads)
            frame = protocol.read_frame(self.reader)
        if frame is None:
            raise ProtocolError("backend closed the connection")
        return frame

    def close(self):
        try:
            if self.proc is not None:
                self.proc.stdin.close()
                self.proc.wait(timeout=10)
            if self.sock is not None:
                self.sock.close()
        except Exception:
            if self.proc is not None:
                self.proc.kill()


class ExternalBackend(Backend):
    """Backend proxy over stdio subprocess pipes or a TCP address."""

    def __init__(self, cmd=None, address=None, connections: int = 1):
        self._cmd = list(cmd) if cmd is not None else None
        self._address = tuple(address) if address is not None else None
        self._pool = [
            _Connection(cmd=self._cmd, address=self._address)
            for _ in range(max(1, int(connections)))
        ]
        self._next = 0
        self._pick_lock = threading.Lock()
        self._id_lock = threading.Lock()
        self._request_id = 0
        self._descriptor = None

    def _connection(self) -> _Connection:
        with self._pick_lock:
            conn = self._pool[self._next % len(self._pool)]
            self._next += 1
        return conn

    def _call(self, op: str, params=None, payloads=()):
        with self._id_lock:
            self._request_id += 1
            request_id = self._request_id
        header = {"op": op, "request_id": request_id}
        if params:
            header["params"] = params
        frame = self._connection().roundtrip(header, payloads)
        if frame.header.get("request_id") != request_id:
            raise ProtocolError(
                f"response id {frame.header.get('request_id')} != request id {request_id}"
            )
        error = frame.header.get("error")
        if error:
            code = error.get("code", "backend_error")
            exc_type = _ERROR_TYPES.get(code)
            if exc_type is not None:
                raise exc_type(error.get("message", code))
            raise BackendError(error.get("message", code), code=code)
        return frame

    def describe(self) -> BackendDescriptor:
        if self._descriptor is None:
            result = self._call("describe").header["result"]
            self._descriptor = BackendDescriptor(
                kind=f"external:{result.get('kind', '?')}",
                capabilities=frozenset(result.get("capabilities", [])),
                layer_ids=tuple(result.get("layer_ids", [])),
            )
        return self._descriptor

    def echo(self, payloads=()) -> bytes:
        return self._call("echo", payloads=payloads).payload

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        frame = self._call("embed_image", payloads=(pack_tensor(np.asarray(image)),))
        (record,) = unpack_all(frame.payload)
        return record.array

    def embed_text(self, text: str) -> np.ndarray:
        frame = self._call("embed_text", params={"text": text})
        (record,) = unpack_all(frame.payload)
        return record.array

    def train_classifier(self, manifest_path: str, seed: int = 0) -> None:
        self._call("train_classifier", params={"manifest": str(manifest_path), "seed": seed})

    def gradient_maps(self, image: np.ndarray):
        from .base import GradientMaps

        frame = self._call("gradient_maps", payloads=(pack_tensor(np.asarray(image)),))
        result = frame.header["result"]
        layer_ids = list(result["layer_ids"])
        records = unpack_all(frame.payload)
        expected = len(layer_ids) * (2 if result.get("activations") else 1)
        if len(records) != expected:
            raise ProtocolError(f"expected {expected} gradient payloads, got {len(records)}")
        layers = {k: records[i].array for i, k in enumerate(layer_ids)}
        activations = None
        if result.get("activations"):
            activations = {
                k: records[len(layer_ids) + i].array for i, k in enumerate(layer_ids)
            }
        return GradientMaps(
            probability=float(result["probability"]), layers=layers, activations=activations
        )

    def segment_prompted(self, image: np.ndarray, prompts: PromptSet) -> np.ndarray:
        frame = self._call(
            "segment_prompted",
            params={"prompts": prompts.to_json_obj()},
            payloads=(pack_tensor(np.asarray(image)),),
        )
        (record,) = unpack_all(frame.payload)
        return record.array.astype(np.uint8)

    def train_segmenter(self, manifest_path: str, seed: int = 0) -> None:
        self._call("train_segmenter", params={"manifest": str(manifest_path), "seed": seed})

    def predict_volume(self, voxels: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
        frame = self._call(
            "predict_volume", payloads=(pack_tensor(np.asarray(voxels), spacing=spacing),)
        )
        (record,) = unpack_all(frame.payload)
        return record.array.astype(np.uint8)

    def close(self) -> None:
        for conn in self._pool:
            conn.close()
