"""The recurrent unit: propose, prompt, classify, filter, repeat.

Each step generates mask proposals for the surviving queries, renders a
visual prompt per query from its binarized mask, scores every prompted
image against every query, and keeps a query only when its own diagonal
similarity clears the threshold. The loop stops as soon as the query set
survives a step unchanged (or empties out), and the final step's masks are
the output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .backend import Backend
from .camgen import propose_masks
from .config import ConfigError, PipelineConfig, validate_config
from .core import BACKGROUND, QueryState, SegResult, as_image, binarize
from .postproc import argmax_labels, background_channel, unary_distribution
from .prompter import apply_visual_prompts


@dataclass(frozen=True)
class StepTrace:
    """Diagnostic record of one recurrence step."""

    step: int
    queries_in: tuple[tuple[int, str], ...]
    diag_scores: tuple[float, ...]
    queries_out: tuple[tuple[int, str], ...]
    mask_stats: tuple[dict, ...]

    def to_json(self) -> str:
        return json.dumps({
            "step": self.step,
            "queries_in": [list(e) for e in self.queries_in],
            "diag_scores": list(self.diag_scores),
            "queries_out": [list(e) for e in self.queries_out],
            "mask_stats": list(self.mask_stats),
        })


def write_trace(path, traces) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tr in traces:
            fh.write(tr.to_json() + "\n")


def classify(backend: Backend, prompted, queries: QueryState) -> np.ndarray:
    """Similarity matrix between prompted images and query texts.

    Row i scores query i's prompted image against every text; a softmax
    along the text dimension makes each row a distribution.
    """
    if len(prompted) != len(queries):
        raise ValueError(f"need one prompted image per query "
                         f"({len(prompted)} != {len(queries)})")
    logits = np.asarray(backend.score(prompted, queries.texts),
                        dtype=np.float64)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def sigma_filter(p: np.ndarray, queries: QueryState,
                 theta: float) -> QueryState:
    """Keep query i exactly when its diagonal similarity is >= theta."""
    p = np.asarray(p)
    if p.shape != (len(queries), len(queries)):
        raise ValueError("similarity matrix does not match query count")
    keep = [bool(p[i, i] >= theta) for i in range(len(queries))]
    return queries.subset(keep)


def run(backend: Backend, image, h0, cfg: PipelineConfig,
        max_steps: int | None = None,
        prompt_sink: Callable | None = None,
        ) -> tuple[SegResult, list[StepTrace]]:
    """Run the recurrence until the query set is stable.

    ``h0`` is the user's initial query list (unique, non-empty). Returns
    the pre-refinement result (soft masks and a plain argmax label map)
    plus the per-step trace. ``max_steps`` forces termination after that
    many steps with all current queries kept, which disables the
    recurrence when set to 1. ``prompt_sink(step, (index, text), image)``
    receives every prompted image, for debugging dumps.

    A query whose binarized mask is empty cannot be visually prompted; it
    receives a diagonal score of 0 and is filtered in that step.
    """
    errors = validate_config(cfg)
    if errors:
        raise ConfigError("; ".join(errors))
    img = as_image(image)
    state = QueryState.initial(h0)
    spec = cfg.prompt_spec()
    traces: list[StepTrace] = []

    t = 0
    while True:
        t += 1
        stack = propose_masks(backend, img, state, cfg)
        bins = [binarize(m, cfg.eta) for m in stack]
        stats = tuple({"mean": float(m.mean()), "max": float(m.max()),
                       "area": b.area} for m, b in zip(stack, bins))

        if max_steps is not None and t >= max_steps:
            final = QueryState(state.entries, step=t)
            traces.append(StepTrace(step=t, queries_in=state.entries,
                                    diag_scores=(), queries_out=final.entries,
                                    mask_stats=stats))
            return _make_result(img, stack, final, t), traces

        diag = np.zeros(len(state))
        nonempty = [i for i, b in enumerate(bins) if b.area > 0]
        if nonempty:
            prompted = []
            for i in nonempty:
                rendered = apply_visual_prompts(img, bins[i], spec)
                prompted.append(rendered)
                if prompt_sink is not None:
                    prompt_sink(t, state.entries[i], rendered)
            sub = QueryState(tuple(state.entries[i] for i in nonempty),
                             step=state.step)
            p = classify(backend, prompted, sub)
            for row, i in enumerate(nonempty):
                diag[i] = p[row, row]

        new_state = state.subset([bool(d >= cfg.theta) for d in diag], step=t)
        traces.append(StepTrace(step=t, queries_in=state.entries,
                                diag_scores=tuple(float(d) for d in diag),
                                queries_out=new_state.entries,
                                mask_stats=stats))

        if len(new_state) == len(state):
            return _make_result(img, stack, new_state, t), traces
        if len(new_state) == 0:
            empty = np.zeros((0,) + img.shape[:2], dtype=np.float32)
            return _make_result(img, empty, new_state, t), traces
        state = new_state


def _make_result(img: np.ndarray, stack: np.ndarray, surviving: QueryState,
                 steps: int) -> SegResult:
    h, w = img.shape[:2]
    if len(surviving) == 0:
        label_map = np.full((h, w), BACKGROUND, dtype=np.int32)
    else:
        q = unary_distribution(stack, background_channel(stack))
        label_map = argmax_labels(q, labels=surviving.indices)
    return SegResult(label_map=label_map, soft_masks=stack,
                     surviving=surviving, steps=steps)
