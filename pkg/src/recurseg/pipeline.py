"""End-to-end segmentation: recurrence, CRF refinement, optional ensemble."""

from __future__ import annotations

import numpy as np

from .backend import Backend
from .config import PipelineConfig
from .core import BACKGROUND, BinMask, SegResult
from .postproc import (argmax_labels, background_channel, crf_refine,
                       sam_ensemble, unary_distribution)
from .recurrence import StepTrace, run


def paint_masks(masks: list[BinMask], labels, shape) -> np.ndarray:
    """Compose per-label masks into a label map.

    Masks are painted largest-first so that on overlap the smaller mask
    wins (it is painted later).
    """
    lm = np.full(shape, BACKGROUND, dtype=np.int32)
    order = sorted(range(len(masks)), key=lambda i: -masks[i].area)
    for i in order:
        lm[masks[i].mask] = labels[i]
    return lm


def segment_image(backend: Backend, image, queries, cfg: PipelineConfig,
                  *, use_crf: bool = True, proposals=None,
                  max_steps: int | None = None, prompt_sink=None,
                  ) -> tuple[SegResult, list[StepTrace]]:
    """Run the full pipeline on one image.

    ``proposals`` is an optional list of external binary masks to ensemble
    with the refined output. Returns the final result plus the recurrence
    trace.
    """
    pre, traces = run(backend, image, queries, cfg, max_steps=max_steps,
                      prompt_sink=prompt_sink)
    if len(pre.surviving) == 0:
        return pre, traces

    bg = background_channel(pre.soft_masks)
    if use_crf:
        q = crf_refine(image, pre.soft_masks, bg, cfg.crf)
    else:
        q = unary_distribution(pre.soft_masks, bg)
    label_map = argmax_labels(q, labels=pre.surviving.indices)

    if proposals:
        per_label = [BinMask.from_array(label_map == idx)
                     for idx in pre.surviving.indices]
        merged = sam_ensemble(per_label, list(proposals),
                              cfg.phi_iom, cfg.phi_iou)
        label_map = paint_masks(merged, pre.surviving.indices,
                                label_map.shape)

    result = SegResult(label_map=label_map, soft_masks=pre.soft_masks,
                       surviving=pre.surviving, steps=pre.steps)
    return result, traces
