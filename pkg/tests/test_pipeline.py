"""Pipeline glue: CRF integration, ensemble painting, degenerate inputs."""

import numpy as np

from recurseg.backend import ToyBackend, ToySceneSpec
from recurseg.config import PipelineConfig
from recurseg.core import BACKGROUND, BinMask
from recurseg.metrics import miou
from recurseg.pipeline import paint_masks, segment_image

from conftest import ABSENT_TEXTS, FIXTURE_SEED


def test_paint_masks_smaller_wins_overlap():
    big = np.zeros((6, 6), dtype=bool)
    big[0:6, 0:6] = True
    small = np.zeros((6, 6), dtype=bool)
    small[2:4, 2:4] = True
    lm = paint_masks([BinMask.from_array(big), BinMask.from_array(small)],
                     [0, 1], (6, 6))
    assert (lm[2:4, 2:4] == 1).all()
    assert lm[0, 0] == 0


def test_paint_masks_background_elsewhere():
    m = np.zeros((4, 4), dtype=bool)
    m[0, 0] = True
    lm = paint_masks([BinMask.from_array(m)], [7], (4, 4))
    assert lm[0, 0] == 7
    assert (lm.ravel()[1:] == BACKGROUND).all()


def test_crf_improves_or_matches_toy_miou():
    scene = ToySceneSpec.random(seed=FIXTURE_SEED, n_planted=3)
    backend = ToyBackend(scene)
    image = scene.render()
    h0 = [c.text for c in scene.planted] + list(ABSENT_TEXTS)

    gt = np.zeros((64, 64), dtype=np.int64)
    for i, c in enumerate(scene.planted):
        gt[c.mask.mask] = i + 1

    def score(res):
        pred = res.label_map + 1
        pred[res.label_map == BACKGROUND] = 0
        return miou([pred], [gt], 4).miou

    plain, _ = segment_image(backend, image, h0, PipelineConfig(),
                             use_crf=False)
    refined, _ = segment_image(backend, image, h0, PipelineConfig(),
                               use_crf=True)
    assert score(refined) >= score(plain)


def test_all_absent_returns_empty_result():
    scene = ToySceneSpec.random(seed=3, n_planted=2)
    backend = ToyBackend(scene)
    res, traces = segment_image(backend, scene.render(),
                                ["wraith", "specter"], PipelineConfig())
    assert len(res.surviving) == 0
    assert (res.label_map == BACKGROUND).all()
    assert res.steps >= 1 and traces


def test_ensemble_replaces_with_exact_proposals():
    scene = ToySceneSpec.random(seed=FIXTURE_SEED, n_planted=3)
    backend = ToyBackend(scene)
    image = scene.render()
    h0 = [c.text for c in scene.planted]
    proposals = [c.mask for c in scene.planted]
    res, _ = segment_image(backend, image, h0, PipelineConfig(),
                           use_crf=True, proposals=proposals)
    for i, c in enumerate(scene.planted):
        np.testing.assert_array_equal(res.label_map == i, c.mask.mask)
