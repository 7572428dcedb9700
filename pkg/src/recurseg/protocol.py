"""Backend wire protocol: newline-delimited JSON frames, version 1.

Requests carry a PNG-encoded image and text lists; responses carry either
a logits matrix or the activation payload with arrays encoded as base64
little-endian float32, row-major::

    {"v":1,"op":"score","image_png_b64":...,"fg_texts":[...],"bg_texts":[]}
    {"v":1,"ok":true,"logits":[[...]]}

    {"v":1,"op":"activations","image_png_b64":...,"fg_texts":[...],
     "bg_texts":[...]}
    {"v":1,"ok":true,"scores":[...],"features_b64":...,"grads_b64":...,
     "attn_b64":...,"shape":{"k":K,"h":H,"w":W,"n":N,"l":L}}

Errors come back as ``{"ok":false,"err":"..."}`` and leave the connection
open. Requests may carry an optional ``role`` hint ("proposal" or
"classifier") telling dual-encoder servers which model to use; servers
with a single model ignore it.

The same framing runs over TCP or a stdio pipe pair. One connection
handles one request at a time, in order.
"""

from __future__ import annotations

import base64
import io
import json
import socket
import socketserver
import threading

import numpy as np
from PIL import Image

from .backend import Backend, BackendError, CamBundle

PROTOCOL_VERSION = 1
_MAX_FRAME = 512 * 1024 * 1024


class ProtocolError(BackendError):
    """Malformed frames, version mismatches, or shape mismatches."""


def encode_array(arr: np.ndarray) -> str:
    """Base64 of the array's little-endian float32 row-major bytes."""
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def decode_array(data: str, shape: tuple[int, ...]) -> np.ndarray:
    raw = base64.b64decode(data.encode("ascii"), validate=True)
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise ProtocolError(f"array payload has {len(raw)} bytes, "
                            f"expected {expected} for shape {shape}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def encode_image(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(
        buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_image(data: str) -> np.ndarray:
    raw = base64.b64decode(data.encode("ascii"), validate=True)
    img = Image.open(io.BytesIO(raw)).convert("RGB")
    return np.asarray(img, dtype=np.uint8)


def write_frame(stream, payload: dict) -> None:
    stream.write(json.dumps(payload).encode("utf-8") + b"\n")
    stream.flush()


def read_frame(stream) -> dict | None:
    """One JSON object per line; None on clean EOF."""
    line = stream.readline(_MAX_FRAME)
    if not line:
        return None
    try:
        data = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed frame: {exc}") from None
    if not isinstance(data, dict):
        raise ProtocolError("frame must be a JSON object")
    return data


# --- client -----------------------------------------------------------------

class RemoteBackend(Backend):
    """Client for a protocol-speaking model server.

    Requests on one connection are serialized; use separate instances for
    parallel images.
    """

    kind = "remote"

    def __init__(self, host: str, port: int, timeout: float = 60.0):
        self.host = host
        self.port = port
        self.timeout = timeout
        self.descriptor = f"remote:{host}:{port}"
        self._lock = threading.Lock()
        self._sock: socket.socket | None = None
        self._reader = None
        self._writer = None

    def _connect(self):
        if self._sock is not None:
            return
        try:
            sock = socket.create_connection((self.host, self.port),
                                            timeout=self.timeout)
        except OSError as exc:
            raise BackendError(
                f"remote backend unreachable at {self.host}:{self.port}: "
                f"{exc}") from None
        self._sock = sock
        self._reader = sock.makefile("rb")
        self._writer = sock.makefile("wb")

    def close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None
                self._reader = None
                self._writer = None

    def _request(self, payload: dict) -> dict:
        with self._lock:
            self._connect()
            try:
                write_frame(self._writer, payload)
                reply = read_frame(self._reader)
            except OSError as exc:
                self.close()
                raise BackendError(f"remote connection failed: {exc}") from None
        if reply is None:
            self.close()
            raise BackendError("remote server closed the connection")
        if not reply.get("ok", False):
            raise BackendError(f"remote error: {reply.get('err', 'unknown')}")
        if reply.get("v") != PROTOCOL_VERSION:
            raise ProtocolError(f"protocol version mismatch: "
                                f"got {reply.get('v')!r}, "
                                f"want {PROTOCOL_VERSION}")
        return reply

    def score(self, images, texts) -> np.ndarray:
        if not len(images):
            raise ValueError("images must be non-empty")
        if not len(texts):
            raise ValueError("texts must be non-empty")
        rows = []
        for image in images:
            reply = self._request({
                "v": PROTOCOL_VERSION, "op": "score",
                "image_png_b64": encode_image(image),
                "fg_texts": list(texts), "bg_texts": [],
                "role": "classifier",
            })
            logits = reply.get("logits")
            if (not isinstance(logits, list) or len(logits) != 1
                    or len(logits[0]) != len(texts)):
                raise ProtocolError("score reply has wrong logits shape")
            rows.append(logits[0])
        return np.asarray(rows, dtype=np.float32)

    def activations(self, image, fg_texts, bg_texts=()) -> CamBundle:
        if not len(fg_texts):
            raise ValueError("fg_texts must be non-empty")
        reply = self._request({
            "v": PROTOCOL_VERSION, "op": "activations",
            "image_png_b64": encode_image(image),
            "fg_texts": list(fg_texts), "bg_texts": list(bg_texts),
            "role": "proposal",
        })
        try:
            shape = reply["shape"]
            k, h, w = int(shape["k"]), int(shape["h"]), int(shape["w"])
            n, l = int(shape["n"]), int(shape["l"])
        except (KeyError, TypeError, ValueError):
            raise ProtocolError("activations reply lacks a usable shape") from None
        if n != len(fg_texts):
            raise ProtocolError(f"server returned {n} queries, "
                                f"expected {len(fg_texts)}")
        scores = np.asarray(reply.get("scores", ()), dtype=np.float32)
        if scores.shape != (n,):
            raise ProtocolError("activations reply has wrong scores length")
        try:
            features = decode_array(reply["features_b64"], (k, h, w))
            grads = decode_array(reply["grads_b64"], (n, k, h, w))
            attn = decode_array(reply["attn_b64"], (l, h * w, h * w))
        except KeyError as exc:
            raise ProtocolError(f"activations reply missing {exc}") from None
        return CamBundle(features=features, grads=grads, attn=attn,
                         scores=scores)


# --- server -----------------------------------------------------------------

def handle_request(backend: Backend, request: dict) -> dict:
    """Answer one decoded request frame using ``backend``."""
    if request.get("v") != PROTOCOL_VERSION:
        return {"ok": False,
                "err": f"unsupported protocol version {request.get('v')!r}"}
    op = request.get("op")
    try:
        if op == "score":
            image = decode_image(request["image_png_b64"])
            texts = list(request.get("fg_texts", ()))
            logits = backend.score([image], texts)
            return {"v": PROTOCOL_VERSION, "ok": True,
                    "logits": np.asarray(logits, dtype=np.float64).tolist()}
        if op == "activations":
            image = decode_image(request["image_png_b64"])
            fg = list(request.get("fg_texts", ()))
            bg = list(request.get("bg_texts", ()))
            bundle = backend.activations(image, fg, bg)
            k, h, w = bundle.features.shape
            return {
                "v": PROTOCOL_VERSION, "ok": True,
                "scores": bundle.scores.astype(float).tolist(),
                "features_b64": encode_array(bundle.features),
                "grads_b64": encode_array(bundle.grads),
                "attn_b64": encode_array(bundle.attn),
                "shape": {"k": k, "h": h, "w": w,
                          "n": int(bundle.scores.shape[0]),
                          "l": int(bundle.attn.shape[0])},
            }
        return {"ok": False, "err": f"unknown op {op!r}"}
    except (KeyError, ValueError, BackendError) as exc:
        return {"ok": False, "err": str(exc)}


def serve_stdio(backend: Backend, rfile, wfile) -> None:
    """Serve frames over a pipe pair until EOF."""
    while True:
        try:
            request = read_frame(rfile)
        except ProtocolError as exc:
            write_frame(wfile, {"ok": False, "err": str(exc)})
            continue
        if request is None:
            return
        write_frame(wfile, handle_request(backend, request))


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        serve_stdio(self.server.backend, self.rfile, self.wfile)  # type: ignore[attr-defined]


class BackendServer(socketserver.ThreadingTCPServer):
    """TCP server exposing any in-process backend over the protocol.

    Each connection gets its own thread; requests within a connection are
    answered in order.
    """

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, backend: Backend, host: str = "127.0.0.1",
                 port: int = 0):
        super().__init__((host, port), _Handler)
        self.backend = backend

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def serve_in_thread(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread
