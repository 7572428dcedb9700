"""CLIP model server for the segmentation backend wire protocol."""

from .framing import (PROTOCOL_VERSION, FrameError, decode_array,
                      decode_image, encode_array, encode_image, read_frame,
                      write_frame)
from .model import DEFAULT_TEMPLATE, ClipScorer
from .server import SidecarConfig, SidecarServer, load_scorers, serve

__version__ = "0.1.0"

__all__ = [
    "PROTOCOL_VERSION", "FrameError", "ClipScorer", "DEFAULT_TEMPLATE",
    "SidecarConfig", "SidecarServer", "decode_array", "decode_image",
    "encode_array", "encode_image", "load_scorers", "read_frame", "serve",
    "write_frame",
]
