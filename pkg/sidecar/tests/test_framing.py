"""Codec round-trips: the same suite shape the engine's toy backend passes."""

import io

import numpy as np
import pytest

from clip_sidecar.framing import (FrameError, decode_array, decode_image,
                                  encode_array, encode_image, read_frame,
                                  write_frame)


def test_array_round_trip_random_payloads():
    rng = np.random.default_rng(0)
    for _ in range(20):
        ndim = int(rng.integers(1, 5))
        shape = tuple(int(rng.integers(1, 5)) for _ in range(ndim))
        arr = rng.standard_normal(shape).astype(np.float32)
        np.testing.assert_array_equal(decode_array(encode_array(arr), shape),
                                      arr)


def test_array_length_check():
    payload = encode_array(np.zeros(3, dtype=np.float32))
    with pytest.raises(FrameError):
        decode_array(payload, (4,))


def test_image_round_trip():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (17, 11, 3)).astype(np.uint8)
    np.testing.assert_array_equal(decode_image(encode_image(img)), img)


def test_frame_round_trip():
    buf = io.BytesIO()
    write_frame(buf, {"v": 1, "op": "score", "fg_texts": ["a"]})
    buf.seek(0)
    assert read_frame(buf) == {"v": 1, "op": "score", "fg_texts": ["a"]}
    assert read_frame(buf) is None


def test_bad_json_raises():
    with pytest.raises(FrameError):
        read_frame(io.BytesIO(b"{oops\n"))
    with pytest.raises(FrameError):
        read_frame(io.BytesIO(b"42\n"))
