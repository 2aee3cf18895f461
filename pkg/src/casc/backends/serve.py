"""Serve any in-process backend over the frame protocol (stdio or TCP).

One connection processes one request at a time. Header or payload errors
produce an error frame and leave the connection usable; only a broken length
prefix is unrecoverable for the stream.
"""

from __future__ import annotations

import argparse
import socketserver
import sys
import threading

import numpy as np

from ..errors import BackendError, CascError, ProtocolError
from ..prompting import PromptSet
from ..tensorio import pack_tensor, unpack_all
from . import protocol
from .analytic import AnalyticBackend, AnalyticSettings
from .base import Backend, require_capability


class BackendServer:
    """Dispatches decoded frames against a backend instance."""

    def __init__(self, backend: Backend):
        self.backend = backend
        self._lock = threading.Lock()

    def handle_body(self, body: bytes) -> bytes:
        """Process one frame body; returns the encoded response frame."""
        request_id = None
        try:
            frame = protocol.decode_body(body)
            request_id = frame.header.get("request_id")
            with self._lock:
                header, payloads = self._dispatch(frame)
            header["request_id"] = request_id
            return protocol.encode_frame(header, payloads)
        except BackendError as exc:
            return protocol.encode_frame(
                {"request_id": request_id, "error": {"code": exc.code, "message": str(exc)}}
            )
        except CascError as exc:
            return protocol.encode_frame(
                {"request_id": request_id, "error": {"code": "bad_request", "message": str(exc)}}
            )
        except Exception as exc:  # pragma: no cover - defensive
            return protocol.encode_frame(
                {"request_id": request_id, "error": {"code": "internal", "message": str(exc)}}
            )

    def _dispatch(self, frame: protocol.Frame):
        op = frame.header.get("op")
        params = frame.header.get("params", {}) or {}
        if op == "describe":
            d = self.backend.describe()
            return (
                {
                    "result": {
                        "kind": d.kind,
                        "capabilities": sorted(d.capabilities),
                        "layer_ids": list(d.layer_ids),
                    }
                },
                (),
            )
        if op == "echo":
            return {"result": {"bytes": len(frame.payload)}}, (frame.payload,)
        if op not in self.backend.describe().capabilities:
            raise BackendError(f"op {op!r} is not a declared capability",
                               code="unsupported_capability")
        if op == "embed_image":
            (record,) = self._tensors(frame, 1)
            vec = self.backend.embed_image(record.array.astype(np.float32))
            return {"result": {"dim": int(vec.size)}}, (pack_tensor(vec),)
        if op == "embed_text":
            vec = self.backend.embed_text(str(params.get("text", "")))
            return {"result": {"dim": int(vec.size)}}, (pack_tensor(vec),)
        if op == "train_classifier":
            self.backend.train_classifier(str(params["manifest"]), int(params.get("seed", 0)))
            return {"result": {"status": "trained"}}, ()
        if op == "gradient_maps":
            (record,) = self._tensors(frame, 1)
            maps = self.backend.gradient_maps(record.array.astype(np.float32))
            layer_ids = list(maps.layers)
            payloads = [pack_tensor(maps.layers[k]) for k in layer_ids]
            has_acts = maps.activations is not None
            if has_acts:
                payloads += [pack_tensor(maps.activations[k]) for k in layer_ids]
            header = {
                "result": {
                    "probability": float(maps.probability),
                    "layer_ids": layer_ids,
                    "activations": has_acts,
                }
            }
            return header, payloads
        if op == "segment_prompted":
            (record,) = self._tensors(frame, 1)
            prompts = PromptSet.from_json_obj(params["prompts"])
            mask = self.backend.segment_prompted(record.array.astype(np.float32), prompts)
            return {"result": {}}, (pack_tensor(mask.astype(np.uint8)),)
        if op == "train_segmenter":
            self.backend.train_segmenter(str(params["manifest"]), int(params.get("seed", 0)))
            return {"result": {"status": "trained"}}, ()
        if op == "predict_volume":
            (record,) = self._tensors(frame, 1)
            spacing = record.spacing or (1.0, 1.0, 1.0)
            mask = self.backend.predict_volume(record.array.astype(np.float32), spacing)
            return {"result": {}}, (pack_tensor(mask.astype(np.uint8)),)
        raise BackendError(f"unknown op {op!r}", code="unsupported_capability")

    def _tensors(self, frame: protocol.Frame, expected: int):
        try:
            records = unpack_all(frame.payload)
        except CascError as exc:
            raise ProtocolError(f"bad tensor payload: {exc}") from exc
        if len(records) != expected:
            raise ProtocolError(f"expected {expected} payload tensor(s), got {len(records)}")
        return records


def serve_stream(server: BackendServer, reader, writer) -> None:
    while True:
        try:
            raw = protocol.read_raw_frame(reader)
        except ProtocolError:
            return  # cannot resync after a broken length prefix
        if raw is None:
            return
        writer.write(server.handle_body(raw[4:]))
        writer.flush()


def serve_stdio(backend: Backend) -> None:
    server = BackendServer(backend)
    serve_stream(server, sys.stdin.buffer, sys.stdout.buffer)


class _TCPHandler(socketserver.BaseRequestHandler):
    def handle(self):
        reader = self.request.makefile("rb")
        writer = self.request.makefile("wb")
        serve_stream(self.server.backend_server, reader, writer)


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def serve_tcp(backend: Backend, host="127.0.0.1", port=0):
    server = _TCPServer((host, port), _TCPHandler)
    server.backend_server = BackendServer(backend)
    return server


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Serve the analytic backend over the frame protocol")
    parser.add_argument("--listen", choices=("stdio", "socket"), default="stdio")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=0)
    parser.add_argument("--tau", type=float, default=0.5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    backend = AnalyticBackend(AnalyticSettings(tau=args.tau, seed=args.seed))
    if args.listen == "stdio":
        serve_stdio(backend)
        return 0
    server = serve_tcp(backend, host=args.host, port=args.port)
    print(f"listening on {server.server_address[0]}:{server.server_address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
