import numpy as np
import pytest

from clip_sidecar.model import ClipScorer
from clip_sidecar.server import SidecarServer


@pytest.fixture(scope="session")
def tiny_scorer():
    return ClipScorer.tiny_random(seed=0)


@pytest.fixture(scope="session")
def test_image():
    rng = np.random.default_rng(7)
    img = rng.integers(0, 256, (48, 56, 3)).astype(np.uint8)
    img[8:24, 8:24] = (220, 40, 40)
    return img


@pytest.fixture(scope="session")
def live_server(tiny_scorer):
    server = SidecarServer({"proposal": tiny_scorer,
                            "classifier": tiny_scorer}, "127.0.0.1", 0)
    server.serve_in_thread()
    yield server
    server.shutdown()
    server.server_close()
