"""CAM generation: gradCAM formulas, Sinkhorn, affinity, box masks, CAA."""

import numpy as np
import pytest

from recurseg.backend import CamBundle, ToyBackend
from recurseg.camgen import (AffinityMatrix, box_mask, caa_refine, gradcam,
                             mean_attention, propose_masks, sinkhorn,
                             symmetric_affinity)
from recurseg.config import PipelineConfig
from recurseg.core import QueryState, binarize, resize_bilinear

from conftest import ABSENT_TEXTS


def make_bundle(features, grads, scores=None, n_attn=1):
    """Minimal CamBundle around hand-built features/grads."""
    features = np.asarray(features, dtype=np.float32)
    grads = np.asarray(grads, dtype=np.float32)
    n = grads.shape[0]
    k, h, w = features.shape
    if scores is None:
        scores = np.full(n, 1.0 / n, dtype=np.float32)
    attn = np.stack([np.eye(h * w, dtype=np.float32)] * n_attn)
    return CamBundle(features=features, grads=grads, attn=attn,
                     scores=np.asarray(scores, dtype=np.float32))


class TestGradcam:
    def test_zero_grads_zero_mask(self):
        bundle = make_bundle(np.ones((2, 3, 3)), np.zeros((1, 2, 3, 3)))
        np.testing.assert_array_equal(gradcam(bundle, 0), 0.0)

    def test_single_channel_formula(self):
        """K=1, unit feature map, unit-mean gradients: L = ReLU(A) = ones."""
        bundle = make_bundle(np.ones((1, 2, 2)), np.ones((1, 1, 2, 2)))
        np.testing.assert_allclose(gradcam(bundle, 0), 1.0)

    def test_negative_activation_clipped(self):
        feats = np.array([[[1.0, -2.0], [0.5, -0.1]]])
        grads = np.ones((1, 1, 2, 2))
        cam = gradcam(make_bundle(feats, grads), 0)
        assert cam[0, 1] == 0.0 and cam[1, 1] == 0.0
        np.testing.assert_allclose(cam[0, 0], 1.0)

    def test_scale_invariance(self, rng):
        """Scaling all gradients by c > 0 leaves the normalized map
        unchanged."""
        feats = rng.standard_normal((4, 5, 5))
        grads = rng.standard_normal((2, 4, 5, 5))
        base = gradcam(make_bundle(feats, grads), 1)
        for c in (3.0, 0.25, 1e3):
            scaled = gradcam(make_bundle(feats, c * grads), 1)
            np.testing.assert_allclose(scaled, base, atol=1e-6)

    def test_toy_planted_localization(self, toy_scene, toy_image, toy_backend,
                                      planted_texts):
        """Binarized CAM of a planted query overlaps its region."""
        bundle = toy_backend.activations(toy_image, planted_texts, [])
        for i, concept in enumerate(toy_scene.planted):
            cam = resize_bilinear(gradcam(bundle, i), 64, 64)
            pred = binarize(np.clip(cam, 0, 1), 0.4)
            gt = concept.mask.mask
            inter = np.logical_and(pred.mask, gt).sum()
            union = np.logical_or(pred.mask, gt).sum()
            assert inter / union >= 0.5

    def test_query_index_bounds(self):
        bundle = make_bundle(np.ones((1, 2, 2)), np.ones((1, 1, 2, 2)))
        with pytest.raises(IndexError):
            gradcam(bundle, 1)


class TestSinkhorn:
    def test_identity_fixed_point(self):
        np.testing.assert_allclose(sinkhorn(np.eye(4), 10), np.eye(4))

    def test_uniform_two_by_two(self):
        out = sinkhorn(np.array([[1.0, 1.0], [1.0, 1.0]]), 10)
        np.testing.assert_allclose(out, np.full((2, 2), 0.5))

    def test_random_positive_doubly_stochastic(self, rng):
        w = rng.random((5, 5)) + 0.05
        out = sinkhorn(w, 50)
        assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-5
        assert np.abs(out.sum(axis=0) - 1.0).max() < 1e-5

    def test_many_sizes(self, rng):
        for n in (2, 7, 16, 33, 64):
            w = rng.random((n, n)) + 0.01
            out = sinkhorn(w, 50)
            assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-5
            assert np.abs(out.sum(axis=0) - 1.0).max() < 1e-5

    def test_zero_row_rejected(self):
        w = np.array([[0.0, 0.0], [1.0, 1.0]])
        with pytest.raises(ValueError):
            sinkhorn(w, 10)

    def test_zero_column_rejected(self):
        w = np.array([[0.0, 1.0], [0.0, 1.0]])
        with pytest.raises(ValueError):
            sinkhorn(w, 10)


class TestSymmetricAffinity:
    def test_symmetric_input_unchanged(self, rng):
        d = rng.random((4, 4))
        d = (d + d.T) / 2
        np.testing.assert_allclose(symmetric_affinity(d).matrix, d)

    def test_direct_formula(self):
        d = np.array([[0.0, 1.0], [0.0, 0.0]])
        np.testing.assert_array_equal(symmetric_affinity(d).matrix,
                                      np.array([[0.0, 0.5], [0.5, 0.0]]))

    def test_exactly_symmetric(self, rng):
        for _ in range(20):
            a = symmetric_affinity(rng.random((6, 6))).matrix
            assert np.max(np.abs(a - a.T)) < 1e-12

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            AffinityMatrix(matrix=np.array([[0.0, -0.1], [-0.1, 0.0]]))


def brute_force_components(fg):
    """4-connected component labeling by BFS; the box_mask oracle."""
    fg = np.asarray(fg, dtype=bool)
    seen = np.zeros_like(fg)
    comps = []
    for r in range(fg.shape[0]):
        for c in range(fg.shape[1]):
            if fg[r, c] and not seen[r, c]:
                stack, cells = [(r, c)], []
                seen[r, c] = True
                while stack:
                    y, x = stack.pop()
                    cells.append((y, x))
                    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        ny, nx = y + dy, x + dx
                        if (0 <= ny < fg.shape[0] and 0 <= nx < fg.shape[1]
                                and fg[ny, nx] and not seen[ny, nx]):
                            seen[ny, nx] = True
                            stack.append((ny, nx))
                comps.append(cells)
    return comps


class TestBoxMask:
    def test_all_below_threshold_empty(self):
        bm = box_mask(np.full((4, 4), 0.1), 0.4)
        assert not bm.flat.any()
        assert bm.boxes == ()

    def test_single_blob_bbox(self):
        cam = np.zeros((6, 6))
        cam[1:3, 2:5] = 0.9
        bm = box_mask(cam, 0.4)
        assert bm.boxes == ((1, 2, 2, 4),)
        grid = bm.flat.reshape(6, 6)
        assert grid[1:3, 2:5].all()
        assert grid.sum() == 6

    def test_two_diagonal_blobs_union_not_hull(self):
        """Two blobs at opposite corners produce two boxes; the cells
        between them stay outside the support."""
        cam = np.zeros((6, 6))
        cam[0:2, 0:2] = 1.0
        cam[4:6, 4:6] = 1.0
        bm = box_mask(cam, 0.4)

        comps = brute_force_components(cam >= 0.4)
        expected = np.zeros((6, 6), dtype=bool)
        boxes = set()
        for cells in comps:
            rows = [y for y, _ in cells]
            cols = [x for _, x in cells]
            box = (min(rows), min(cols), max(rows), max(cols))
            boxes.add(box)
            expected[box[0]:box[2] + 1, box[1]:box[3] + 1] = True

        assert set(bm.boxes) == boxes
        np.testing.assert_array_equal(bm.flat.reshape(6, 6), expected)
        assert not bm.flat.reshape(6, 6)[2, 3]  # hull interior excluded

    def test_random_grids_match_bfs_oracle(self, rng):
        for _ in range(25):
            cam = rng.random((6, 6))
            bm = box_mask(cam, 0.5)
            expected = np.zeros((6, 6), dtype=bool)
            for cells in brute_force_components(cam >= 0.5):
                rows = [y for y, _ in cells]
                cols = [x for _, x in cells]
                expected[min(rows):max(rows) + 1,
                         min(cols):max(cols) + 1] = True
            np.testing.assert_array_equal(bm.flat.reshape(6, 6), expected)


def full_box(h, w):
    return box_mask(np.ones((h, w)), 0.5)


class TestCaaRefine:
    def test_identity_affinity_full_box_is_identity(self, rng):
        cam = rng.random((3, 4))
        cam.flat[rng.integers(0, cam.size)] = 1.0  # already max-normalized
        aff = AffinityMatrix(matrix=np.eye(12))
        out = caa_refine(cam, aff, full_box(3, 4), iters=5)
        np.testing.assert_allclose(out, cam, atol=1e-12)

    def test_t_zero_is_box_masked_input(self):
        cam = np.array([[1.0, 0.5], [0.25, 0.0]])
        box = box_mask(np.array([[1.0, 0.0], [1.0, 0.0]]), 0.5)
        aff = AffinityMatrix(matrix=np.full((4, 4), 0.25))
        out = caa_refine(cam, aff, box, iters=0)
        np.testing.assert_allclose(out, np.array([[1.0, 0.0], [0.25, 0.0]]))

    def test_two_by_two_matches_dense_oracle(self):
        """Hand fixture against an explicit dense matrix-vector product."""
        cam = np.array([[0.8, 0.2], [0.4, 1.0]])
        a = np.array([
            [0.4, 0.3, 0.2, 0.1],
            [0.3, 0.4, 0.1, 0.2],
            [0.2, 0.1, 0.4, 0.3],
            [0.1, 0.2, 0.3, 0.4],
        ])
        box_flat = np.array([True, True, False, True])

        # oracle: explicit loops, no shared code with caa_refine
        vec = [0.8, 0.2, 0.4, 1.0]
        prod = [sum(a[i][j] * vec[j] for j in range(4)) for i in range(4)]
        masked = [p if b else 0.0 for p, b in zip(prod, box_flat)]
        peak = max(masked)
        expected = np.array([m / peak for m in masked]).reshape(2, 2)

        from recurseg.camgen import BoxMask
        box = BoxMask(flat=box_flat, boxes=(), shape=(2, 2))
        out = caa_refine(cam, AffinityMatrix(matrix=a), box, iters=1)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_no_mass_outside_box(self, rng):
        for _ in range(10):
            cam = rng.random((4, 4))
            support = rng.random((4, 4))
            box = box_mask(support, 0.5)
            aff = symmetric_affinity(sinkhorn(rng.random((16, 16)) + 0.1, 30))
            out = caa_refine(cam, aff, box, iters=2)
            outside = ~box.flat.reshape(4, 4)
            np.testing.assert_array_equal(out[outside], 0.0)

    def test_repeated_matvec_matches_matrix_power(self, rng):
        cam = rng.random((3, 3))
        aff = symmetric_affinity(sinkhorn(rng.random((9, 9)) + 0.1, 30))
        t = 3
        dense_power = np.linalg.matrix_power(aff.matrix, t)
        expected = dense_power @ cam.reshape(-1)
        expected /= expected.max()
        out = caa_refine(cam, aff, full_box(3, 3), iters=t)
        np.testing.assert_allclose(out.reshape(-1), expected, atol=1e-10)


class TestProposeMasks:
    def test_absent_queries_suppressed(self, toy_scene, toy_image,
                                       toy_backend, planted_texts):
        """With background queries in the softmax, CAMs of texts absent
        from the scene have almost no activation."""
        cfg = PipelineConfig()
        queries = QueryState.initial(planted_texts + list(ABSENT_TEXTS))
        stack = propose_masks(toy_backend, toy_image, queries, cfg)
        assert stack.shape == (5, 64, 64)
        for i in (3, 4):
            assert stack[i].mean() < 0.1

    def test_planted_end_to_end_iou(self, toy_scene, toy_image, toy_backend,
                                    planted_texts):
        cfg = PipelineConfig()
        queries = QueryState.initial(planted_texts)
        stack = propose_masks(toy_backend, toy_image, queries, cfg)
        for i, concept in enumerate(toy_scene.planted):
            pred = binarize(stack[i], cfg.eta)
            gt = concept.mask.mask
            inter = np.logical_and(pred.mask, gt).sum()
            union = np.logical_or(pred.mask, gt).sum()
            assert inter / union >= 0.5

    def test_single_query_no_bg(self, toy_backend, toy_image, planted_texts):
        import dataclasses
        cfg = dataclasses.replace(PipelineConfig(), bg_queries=())
        stack = propose_masks(toy_backend, toy_image,
                              QueryState.initial([planted_texts[0]]), cfg)
        assert stack.shape == (1, 64, 64)
        assert 0.0 <= stack.min() and stack.max() <= 1.0

    def test_empty_queries_rejected(self, toy_backend, toy_image):
        cfg = PipelineConfig()
        state = QueryState.initial(["x"]).subset([False])
        with pytest.raises(ValueError):
            propose_masks(toy_backend, toy_image, state, cfg)

    def test_mutual_background_routes_queries(self, toy_scene, toy_image,
                                              planted_texts):
        """With mutual background, stuff queries use thing queries as
        their background set and vice versa; output order is preserved."""
        import dataclasses
        backend = RecordingBackend(ToyBackend(toy_scene))
        cfg = dataclasses.replace(
            PipelineConfig(), mutual_background=True,
            stuff_queries=(planted_texts[2],))
        queries = QueryState.initial(planted_texts)
        stack = propose_masks(backend, toy_image, queries, cfg)
        assert stack.shape == (3, 64, 64)
        assert len(backend.calls) == 2
        (fg1, bg1), (fg2, bg2) = backend.calls
        assert fg1 == planted_texts[:2] and bg1 == [planted_texts[2]]
        assert fg2 == [planted_texts[2]] and bg2 == planted_texts[:2]


class RecordingBackend:
    """Wraps a backend and records activations calls."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = []
        self.capabilities = inner.capabilities

    def score(self, images, texts):
        return self.inner.score(images, texts)

    def activations(self, image, fg_texts, bg_texts=()):
        self.calls.append((list(fg_texts), list(bg_texts)))
        return self.inner.activations(image, fg_texts, bg_texts)


def test_mean_attention_layer_count(toy_backend, toy_image, planted_texts):
    bundle = toy_backend.activations(toy_image, planted_texts, [])
    m_all = mean_attention(bundle, 8)
    m_two = mean_attention(bundle, 2)
    assert m_all.shape == m_two.shape == (256, 256)
    expected = bundle.attn[-2:].astype(np.float64).mean(axis=0)
    np.testing.assert_allclose(m_two, expected)
