"""Post-processing: dense-CRF mask refinement and proposal ensembling.

The CRF is a fully connected model over pixels with two pairwise kernels
(a spatial Gaussian and a spatial+color bilateral) and Potts label
compatibility, solved by mean-field iteration. For test-scale images the
pairwise message passing is exact; larger inputs fall back to a
downsampled approximation unless exactness is forced.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import BACKGROUND, BinMask, as_image, as_mask_array

# dense bilateral matrices are materialized up to this many pixels (64x64)
_EXACT_MAX_PIXELS = 4096
# above the exact limit, the approximate path downsamples to about this size
_APPROX_TARGET = 64


@dataclass(frozen=True)
class CrfParams:
    """Mean-field CRF hyper-parameters (kernel widths, weights, iterations)."""

    gauss_sxy: float = 3.0
    gauss_w: float = 3.0
    bilat_sxy: float = 80.0
    bilat_srgb: float = 13.0
    bilat_w: float = 10.0
    iterations: int = 10
    #: None = exact when the image is small enough; True/False force a path
    exact: bool | None = None

    def validate(self) -> list[str]:
        errors = []
        for name in ("gauss_sxy", "bilat_sxy", "bilat_srgb"):
            if getattr(self, name) <= 0:
                errors.append(f"{name} must be > 0")
        if self.iterations < 1:
            errors.append("iterations must be >= 1")
        return errors


def background_channel(soft_masks: np.ndarray) -> np.ndarray:
    """Background probability: 1 - max over foreground channels."""
    if soft_masks.shape[0] == 0:
        h, w = soft_masks.shape[1:]
        return np.ones((h, w), dtype=np.float64)
    return 1.0 - soft_masks.max(axis=0)


def unary_distribution(soft_masks: np.ndarray,
                       bg_channel: np.ndarray) -> np.ndarray:
    """Stack foreground masks and background into per-pixel distributions."""
    bg = np.asarray(bg_channel, dtype=np.float64)
    stack = np.concatenate(
        [np.asarray(soft_masks, dtype=np.float64).reshape(-1, *bg.shape),
         bg[None]], axis=0)
    prob = np.clip(stack, 1e-8, None)
    return prob / prob.sum(axis=0, keepdims=True)


def _axis_kernel(n: int, sigma: float) -> np.ndarray:
    d = np.arange(n, dtype=np.float64)
    return np.exp(-((d[:, None] - d[None, :]) ** 2) / (2.0 * sigma * sigma))


def _gaussian_message(q: np.ndarray, kh: np.ndarray, kw: np.ndarray) -> np.ndarray:
    # untruncated spatial Gaussian separates exactly into row and column passes
    return np.einsum("ij,cjk,kl->cil", kh, q, kw)


def _sq_distances(feat: np.ndarray) -> np.ndarray:
    # |a-b|^2 = |a|^2 + |b|^2 - 2 a.b, computed via one BLAS matmul
    sq = (feat * feat).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (feat @ feat.T)
    np.maximum(d, 0.0, out=d)
    return d


def _bilateral_matrix(image: np.ndarray, sxy: float, srgb: float) -> np.ndarray:
    h, w = image.shape[:2]
    rr, cc = np.mgrid[0:h, 0:w]
    pos = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float32)
    rgb = image.reshape(-1, 3).astype(np.float32)
    d = _sq_distances(pos) / np.float32(2.0 * sxy * sxy)
    d += _sq_distances(rgb) / np.float32(2.0 * srgb * srgb)
    np.negative(d, out=d)
    return np.exp(d, out=d)


def _bilateral_message_blockwise(q_flat: np.ndarray, image: np.ndarray,
                                 sxy: float, srgb: float,
                                 block: int = 1024) -> np.ndarray:
    """Exact bilateral matvec computed in row blocks (no P x P allocation)."""
    h, w = image.shape[:2]
    n = h * w
    rr, cc = np.mgrid[0:h, 0:w]
    pos = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float32)
    rgb = image.reshape(-1, 3).astype(np.float32)
    pos_sq = (pos * pos).sum(axis=1)
    rgb_sq = (rgb * rgb).sum(axis=1)
    q32 = q_flat.astype(np.float32)
    out = np.empty((q_flat.shape[0], n), dtype=np.float32)
    for start in range(0, n, block):
        stop = min(start + block, n)
        d_pos = (pos_sq[start:stop, None] + pos_sq[None, :]
                 - 2.0 * (pos[start:stop] @ pos.T))
        d_rgb = (rgb_sq[start:stop, None] + rgb_sq[None, :]
                 - 2.0 * (rgb[start:stop] @ rgb.T))
        k = np.exp(-np.maximum(d_pos, 0) / np.float32(2.0 * sxy * sxy)
                   - np.maximum(d_rgb, 0) / np.float32(2.0 * srgb * srgb))
        out[:, start:stop] = q32 @ k.T
    return out


def _downsample_image(image: np.ndarray, f: int) -> np.ndarray:
    h, w = image.shape[:2]
    th, tw = h // f, w // f
    crop = image[:th * f, :tw * f].astype(np.float64)
    blocks = crop.reshape(th, f, tw, f, 3).mean(axis=(1, 3))
    return np.clip(np.round(blocks), 0, 255).astype(np.uint8)


def _downsample_channels(q: np.ndarray, f: int) -> np.ndarray:
    c, h, w = q.shape
    th, tw = h // f, w // f
    crop = q[:, :th * f, :tw * f]
    return crop.reshape(c, th, f, tw, f).mean(axis=(2, 4))


def crf_refine(image, soft_masks: np.ndarray, bg_channel: np.ndarray,
               params: CrfParams = CrfParams()) -> np.ndarray:
    """Mean-field inference; returns per-pixel distributions Q.

    ``soft_masks`` supplies the foreground unaries (one channel per query)
    and ``bg_channel`` the background; the stacked channels are normalized
    to a simplex per pixel before taking negative-log unary potentials.
    The returned Q has shape (N + 1, H, W) with background last.
    """
    img = as_image(image)
    errors = params.validate()
    if errors:
        raise ValueError("; ".join(errors))
    h, w = img.shape[:2]
    prob = unary_distribution(soft_masks, bg_channel)
    n_ch = prob.shape[0]

    exact = params.exact
    if exact is None:
        exact = h * w <= _EXACT_MAX_PIXELS
    if not exact and h * w > _EXACT_MAX_PIXELS:
        # approximate: run the exact solver on a downsampled problem
        f = int(np.ceil(max(h, w) / _APPROX_TARGET))
        small_img = _downsample_image(img, f)
        small_prob = _downsample_channels(prob, f)
        small = crf_refine(small_img, small_prob[:-1], small_prob[-1],
                           CrfParams(params.gauss_sxy, params.gauss_w,
                                     params.bilat_sxy / f, params.bilat_srgb,
                                     params.bilat_w, params.iterations,
                                     exact=True))
        from .core import resize_bilinear
        up = np.stack([resize_bilinear(ch, h, w) for ch in small])
        up = np.clip(up, 1e-12, None)
        return up / up.sum(axis=0, keepdims=True)

    unary = -np.log(prob)
    q = prob.copy()

    use_gauss = params.gauss_w != 0.0
    use_bilat = params.bilat_w != 0.0
    if use_gauss:
        kh = _axis_kernel(h, params.gauss_sxy)
        kw = _axis_kernel(w, params.gauss_sxy)
    kb = None
    if use_bilat and h * w <= _EXACT_MAX_PIXELS:
        kb = _bilateral_matrix(img, params.bilat_sxy, params.bilat_srgb)

    for _ in range(params.iterations):
        msg = np.zeros_like(q)
        if use_gauss:
            # k(i,i)=1, so subtract each pixel's own contribution
            msg += params.gauss_w * (_gaussian_message(q, kh, kw) - q)
        if use_bilat:
            q_flat = q.reshape(n_ch, -1)
            if kb is not None:
                b = q_flat.astype(np.float32) @ kb.T
            else:
                b = _bilateral_message_blockwise(
                    q_flat, img, params.bilat_sxy, params.bilat_srgb)
            msg += params.bilat_w * (b.astype(np.float64).reshape(n_ch, h, w)
                                     - q)
        # Potts compatibility: each label is penalized by the message mass
        # of all other labels
        cross = msg.sum(axis=0, keepdims=True) - msg
        energy = unary + cross
        energy -= energy.min(axis=0, keepdims=True)
        expn = np.exp(-energy)
        q = expn / expn.sum(axis=0, keepdims=True)
    return q


def argmax_labels(q: np.ndarray, labels=None) -> np.ndarray:
    """Per-pixel argmax over channels; the last channel maps to BACKGROUND.

    ``labels`` gives the query index for each foreground channel (defaults
    to channel position). Ties resolve to the lowest-index foreground
    channel because argmax scans channels in order.
    """
    q = np.asarray(q, dtype=np.float64)
    sums = q.sum(axis=0)
    if q.size and np.max(np.abs(sums - 1.0)) > 1e-4:
        raise ValueError("Q channels must form a simplex per pixel")
    n_fg = q.shape[0] - 1
    if labels is None:
        labels = list(range(n_fg))
    if len(labels) != n_fg:
        raise ValueError("labels length must match foreground channel count")
    idx = np.argmax(q, axis=0)
    lut = np.asarray(list(labels) + [BACKGROUND], dtype=np.int32)
    return lut[idx]


def iom(a, b) -> float:
    """Intersection over the minimum-area mask; 0 when either is empty."""
    ma, mb = as_mask_array(a), as_mask_array(b)
    if ma.shape != mb.shape:
        raise ValueError("mask shapes differ")
    area_a = int(ma.sum())
    area_b = int(mb.sum())
    if min(area_a, area_b) == 0:
        return 0.0
    inter = int(np.logical_and(ma, mb).sum())
    return inter / min(area_a, area_b)


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 0.0
    return int(np.logical_and(a, b).sum()) / union


def sam_ensemble(crf_masks: list[BinMask], proposals: list[BinMask],
                 phi_iom: float, phi_iou: float) -> list[BinMask]:
    """Replace CRF masks by unions of well-matched external proposals.

    Each proposal joins the CRF mask it overlaps best (IoM >= phi_iom;
    ties prefer the larger CRF mask, then the lower label). A CRF mask is
    replaced by the union of its matched proposals only when that union
    stays IoU-consistent with the original (>= phi_iou).
    """
    assigned: list[list[int]] = [[] for _ in crf_masks]
    for p_idx, prop in enumerate(proposals):
        best = None
        for c_idx, cm in enumerate(crf_masks):
            v = iom(prop, cm)
            if v < phi_iom:
                continue
            key = (v, cm.area, -c_idx)
            if best is None or key > best[0]:
                best = (key, c_idx)
        if best is not None:
            assigned[best[1]].append(p_idx)

    out: list[BinMask] = []
    for c_idx, cm in enumerate(crf_masks):
        if not assigned[c_idx]:
            out.append(cm)
            continue
        union = np.zeros(cm.shape, dtype=bool)
        for p_idx in assigned[c_idx]:
            union |= proposals[p_idx].mask
        if _iou(union, cm.mask) >= phi_iou:
            out.append(BinMask.from_array(union))
        else:
            out.append(cm)
    return out


def load_proposals(path, shape: tuple[int, int]) -> list[BinMask]:
    """Read external proposal masks for the ensemble step.

    ``path`` may be a directory of binary mask PNGs (one proposal each) or
    a single indexed PNG where each distinct non-background value is one
    proposal.
    """
    from PIL import Image

    p = Path(path)
    masks: list[BinMask] = []
    if p.is_dir():
        # one binary PNG per proposal, white = mask
        for f in sorted(p.glob("*.png")):
            arr = np.asarray(Image.open(f).convert("L"))
            masks.append(BinMask.from_array(arr > 127))
    else:
        # single indexed PNG: each value in 1..254 is one proposal
        arr = np.asarray(Image.open(p).convert("L"))
        for v in np.unique(arr):
            if v in (0, 255):
                continue
            masks.append(BinMask.from_array(arr == v))
    for m in masks:
        if m.shape != shape:
            raise ValueError(f"proposal shape {m.shape} does not match image {shape}")
    return masks
