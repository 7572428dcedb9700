"""Wire framing, version 1: one JSON object per line.

Array payloads are base64 of little-endian float32 bytes, row-major.
Images travel as base64 PNG. This module is self-contained so the sidecar
can be deployed without the segmentation engine installed.
"""

from __future__ import annotations

import base64
import io
import json

import numpy as np
from PIL import Image

PROTOCOL_VERSION = 1
_MAX_LINE = 512 * 1024 * 1024


class FrameError(ValueError):
    """Malformed or oversized frame."""


def encode_array(arr: np.ndarray) -> str:
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def decode_array(data: str, shape: tuple[int, ...]) -> np.ndarray:
    raw = base64.b64decode(data.encode("ascii"), validate=True)
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise FrameError(f"array payload is {len(raw)} bytes, "
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
    """Next frame, or None on clean EOF. Raises FrameError on bad JSON."""
    line = stream.readline(_MAX_LINE)
    if not line:
        return None
    try:
        data = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"malformed frame: {exc}") from None
    if not isinstance(data, dict):
        raise FrameError("frame must be a JSON object")
    return data
