import numpy as np
import pytest

from recurseg.backend import ToyBackend, ToySceneSpec

# fixture seed with clean toy behavior: planted CAMs localize well and
# absent-query CAMs are suppressed by the background softmax
FIXTURE_SEED = 7
ABSENT_TEXTS = ("unicorn", "dragon")


@pytest.fixture(scope="session")
def toy_scene():
    return ToySceneSpec.random(seed=FIXTURE_SEED, n_planted=3)


@pytest.fixture(scope="session")
def toy_image(toy_scene):
    return toy_scene.render()


@pytest.fixture(scope="session")
def toy_backend(toy_scene):
    return ToyBackend(toy_scene)


@pytest.fixture(scope="session")
def planted_texts(toy_scene):
    return [c.text for c in toy_scene.planted]


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
