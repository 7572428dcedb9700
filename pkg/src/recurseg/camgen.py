"""Mask proposal generation: gradient CAMs refined by attention affinity.

For each surviving query the pipeline computes a class-activation map from
the backend's feature maps and score gradients, then refines it with a
class-aware affinity built from the attention stack: the attention is made
doubly stochastic by Sinkhorn normalization, symmetrized, and applied as a
diffusion operator restricted to the CAM's thresholded bounding boxes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .backend import Backend, CamBundle
from .config import PipelineConfig
from .core import QueryState, resize_bilinear


@dataclass(frozen=True)
class AffinityMatrix:
    """Symmetric non-negative affinity over feature-grid positions."""

    matrix: np.ndarray
    iters_applied: int = 0

    def __post_init__(self):
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("affinity must be square")
        if not np.allclose(m, m.T, atol=1e-6):
            raise ValueError("affinity must be symmetric within 1e-6")
        if m.min() < 0:
            raise ValueError("affinity must be non-negative")


@dataclass(frozen=True)
class BoxMask:
    """Per-query box support: union of bounding boxes of the thresholded
    CAM's connected components, flattened to 1 x (h*w)."""

    flat: np.ndarray
    boxes: tuple[tuple[int, int, int, int], ...]
    shape: tuple[int, int]


def gradcam(bundle: CamBundle, query_index: int) -> np.ndarray:
    """Class-activation map for one query, max-normalized to [0, 1].

    Neuron importance is the spatial mean of the score gradient per
    channel; the map is the ReLU of the importance-weighted sum of feature
    maps.
    """
    n = bundle.scores.shape[0]
    if not 0 <= query_index < n:
        raise IndexError(f"query_index {query_index} out of range 0..{n - 1}")
    grads = bundle.grads[query_index].astype(np.float64)
    feats = bundle.features.astype(np.float64)
    alpha = grads.mean(axis=(1, 2))
    cam = np.maximum((alpha[:, None, None] * feats).sum(axis=0), 0.0)
    peak = cam.max()
    if peak > 0:
        cam /= peak
    return cam


def sinkhorn(w: np.ndarray, iters: int = 50, tol: float = 1e-6) -> np.ndarray:
    """Alternate row/column normalization until doubly stochastic.

    Stops early once both row and column sums are within ``tol`` of 1.
    Raises ``ValueError`` for inputs with an all-zero row or column, which
    cannot be normalized.
    """
    a = np.asarray(w, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("sinkhorn expects a square matrix")
    if a.min() < 0:
        raise ValueError("sinkhorn expects non-negative entries")
    if np.any(a.sum(axis=1) == 0) or np.any(a.sum(axis=0) == 0):
        raise ValueError("input has an all-zero row or column")
    a = a.copy()
    for _ in range(iters):
        a /= a.sum(axis=1, keepdims=True)
        a /= a.sum(axis=0, keepdims=True)
        dev = max(np.abs(a.sum(axis=1) - 1.0).max(),
                  np.abs(a.sum(axis=0) - 1.0).max())
        if dev < tol:
            break
    return a


def symmetric_affinity(d: np.ndarray) -> AffinityMatrix:
    """Symmetrize a doubly stochastic matrix: (D + D^T) / 2."""
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError("affinity source must be square")
    return AffinityMatrix(matrix=(d + d.T) / 2.0)


def box_mask(cam: np.ndarray, lam: float) -> BoxMask:
    """Bounding-box support of the CAM thresholded at ``lam``.

    Each 4-connected foreground component contributes its own box; the
    support is their union (not a convex hull). An all-background CAM
    yields an empty support.
    """
    cam = np.asarray(cam, dtype=np.float64)
    h, w = cam.shape
    fg = cam >= lam
    support = np.zeros(h * w, dtype=bool)
    boxes: list[tuple[int, int, int, int]] = []
    if fg.any():
        labeled, n = ndimage.label(fg)
        grid = support.reshape(h, w)
        for comp in range(1, n + 1):
            rows, cols = np.where(labeled == comp)
            r0, r1 = int(rows.min()), int(rows.max())
            c0, c1 = int(cols.min()), int(cols.max())
            boxes.append((r0, c0, r1, c1))
            grid[r0:r1 + 1, c0:c1 + 1] = True
    return BoxMask(flat=support, boxes=tuple(boxes), shape=(h, w))


def caa_refine(cam: np.ndarray, affinity: AffinityMatrix, box: BoxMask,
               iters: int) -> np.ndarray:
    """Affinity diffusion of a CAM restricted to its box support.

    Computes ``B * (A^t @ vec(M))`` by repeated matrix-vector products
    (``A^t`` is never materialized; ``t = 0`` is the identity), reshapes
    to the grid and max-normalizes.
    """
    cam = np.asarray(cam, dtype=np.float64)
    h, w = cam.shape
    if affinity.matrix.shape[0] != h * w or box.flat.shape[0] != h * w:
        raise ValueError("affinity/box size does not match the CAM grid")
    if iters < 0:
        raise ValueError("iters must be >= 0")
    v = cam.reshape(-1)
    for _ in range(iters):
        v = affinity.matrix @ v
    v = np.where(box.flat, v, 0.0)
    out = v.reshape(h, w)
    peak = out.max()
    if peak > 0:
        out = out / peak
    return out


def mean_attention(bundle: CamBundle, last_layers: int) -> np.ndarray:
    """Elementwise mean of the last ``last_layers`` attention matrices."""
    stack = bundle.attn.astype(np.float64)
    n = min(last_layers, stack.shape[0])
    return stack[-n:].mean(axis=0)


def _refine_bundle(bundle: CamBundle, rows, cfg: PipelineConfig,
                   out_shape: tuple[int, int]) -> list[np.ndarray]:
    # the affinity is query-independent: build it once per bundle
    attn = mean_attention(bundle, cfg.last_attn_layers)
    affinity = symmetric_affinity(sinkhorn(attn, cfg.sinkhorn_iters))
    masks = []
    for i in rows:
        cam = gradcam(bundle, i)
        refined = caa_refine(cam, affinity, box_mask(cam, cfg.lam),
                             cfg.caa_iters)
        masks.append(np.clip(resize_bilinear(refined, *out_shape), 0.0, 1.0))
    return masks


def propose_masks(backend: Backend, image, queries: QueryState,
                  cfg: PipelineConfig) -> np.ndarray:
    """Soft mask proposals for every surviving query, at image resolution.

    Background queries from the config join the score softmax so spurious
    activations get suppressed. With ``mutual_background`` enabled, queries
    listed in ``stuff_queries`` use the remaining ("thing") queries as
    their background set and vice versa.
    """
    if len(queries) == 0:
        raise ValueError("query state must be non-empty")
    image = np.asarray(image)
    out_shape = image.shape[:2]
    texts = queries.texts

    if cfg.mutual_background and cfg.stuff_queries:
        stuff = set(cfg.stuff_queries)
        thing_idx = [i for i, t in enumerate(texts) if t not in stuff]
        stuff_idx = [i for i, t in enumerate(texts) if t in stuff]
        per_query: list[np.ndarray | None] = [None] * len(texts)
        for own_idx, other_idx in ((thing_idx, stuff_idx),
                                   (stuff_idx, thing_idx)):
            if not own_idx:
                continue
            fg = [texts[i] for i in own_idx]
            bg = [texts[i] for i in other_idx]
            bundle = backend.activations(image, fg, bg)
            refined = _refine_bundle(bundle, range(len(own_idx)), cfg,
                                     out_shape)
            for i, mask in zip(own_idx, refined):
                per_query[i] = mask
        stack = np.stack([m for m in per_query])  # type: ignore[arg-type]
    else:
        bundle = backend.activations(image, texts, list(cfg.bg_queries))
        stack = np.stack(_refine_bundle(bundle, range(len(texts)), cfg,
                                        out_shape))
    return stack.astype(np.float32)
