"""Shared domain types: images, soft/binary masks, query state, results.

Conventions used across the engine:

* images are ``uint8`` arrays of shape ``(H, W, 3)`` in RGB channel order;
* soft masks are ``float32`` arrays in ``[0, 1]``, one ``(H, W)`` grid per
  query, stacked along axis 0;
* label maps are integer arrays where each pixel holds a query's original
  index or :data:`BACKGROUND`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

BACKGROUND = -1
#: value used for BACKGROUND when label maps are stored as 8-bit PNGs
BACKGROUND_PNG = 255


def as_image(arr) -> np.ndarray:
    """Validate and return an RGB image buffer.

    Accepts anything array-like; raises ``ValueError`` unless the result is
    a ``(H, W, 3)`` uint8 array with H, W >= 1.
    """
    a = np.asarray(arr)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"image must have shape (H, W, 3), got {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    if a.dtype != np.uint8:
        raise ValueError(f"image dtype must be uint8, got {a.dtype}")
    return a


def as_soft_mask(arr) -> np.ndarray:
    """Validate a single soft mask: 2-D, finite, values in [0, 1]."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"soft mask must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("soft mask contains non-finite values")
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise ValueError("soft mask values must lie in [0, 1]")
    return a


@dataclass(frozen=True)
class BinMask:
    """A binary mask with its pixel count cached.

    ``mask`` is a read-only bool array of shape ``(H, W)``; ``area`` always
    equals ``mask.sum()``.
    """

    mask: np.ndarray
    area: int

    @classmethod
    def from_array(cls, arr) -> "BinMask":
        m = np.ascontiguousarray(np.asarray(arr, dtype=bool))
        m.setflags(write=False)
        return cls(mask=m, area=int(m.sum()))

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape  # type: ignore[return-value]

    def bbox(self) -> tuple[int, int, int, int] | None:
        """Inclusive (r0, c0, r1, c1) bounding box, or None if empty."""
        if self.area == 0:
            return None
        rows = np.any(self.mask, axis=1)
        cols = np.any(self.mask, axis=0)
        r0, r1 = np.where(rows)[0][[0, -1]]
        c0, c1 = np.where(cols)[0][[0, -1]]
        return int(r0), int(c0), int(r1), int(c1)


def binarize(mask, eta: float) -> BinMask:
    """Threshold a soft mask at ``eta``: kept pixels satisfy value >= eta."""
    m = as_soft_mask(mask)
    return BinMask.from_array(m >= eta)


def as_mask_array(m) -> np.ndarray:
    """Coerce a BinMask or array-like into a bool ndarray."""
    if isinstance(m, BinMask):
        return m.mask
    return np.asarray(m, dtype=bool)


@dataclass(frozen=True)
class QueryState:
    """The surviving set of text queries at a recurrence step.

    ``entries`` pairs each query with the index it held in the user's
    initial list, so downstream labels stay stable as queries get filtered.
    """

    entries: tuple[tuple[int, str], ...]
    step: int = 0

    def __post_init__(self):
        idx = [i for i, _ in self.entries]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("original indices must be strictly increasing")
        if self.step < 0:
            raise ValueError("step must be >= 0")

    @classmethod
    def initial(cls, texts: Iterable[str]) -> "QueryState":
        texts = list(texts)
        if not texts:
            raise ValueError("initial query list must be non-empty")
        if len(set(texts)) != len(texts):
            raise ValueError("query texts must be unique")
        return cls(entries=tuple(enumerate(texts)), step=0)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def texts(self) -> list[str]:
        return [t for _, t in self.entries]

    @property
    def indices(self) -> list[int]:
        return [i for i, _ in self.entries]

    def subset(self, keep: Sequence, step: int | None = None) -> "QueryState":
        """New state keeping entries selected by bool mask or positions."""
        keep = list(keep)
        if keep and all(isinstance(k, (bool, np.bool_)) for k in keep):
            if len(keep) != len(self.entries):
                raise ValueError("bool mask length mismatch")
            picked = tuple(e for e, k in zip(self.entries, keep) if k)
        else:
            positions = sorted(int(k) for k in keep)
            picked = tuple(self.entries[p] for p in positions)
        return QueryState(entries=picked,
                          step=self.step + 1 if step is None else step)

    def is_subset_of(self, other: "QueryState") -> bool:
        return set(self.entries) <= set(other.entries)


@dataclass(frozen=True)
class SegResult:
    """Final output: a label map plus the surviving queries and their masks.

    ``label_map`` holds original query indices, with :data:`BACKGROUND` for
    unassigned pixels. ``soft_masks`` are the last step's mask proposals
    (one row per surviving query, pre-refinement).
    """

    label_map: np.ndarray
    soft_masks: np.ndarray
    surviving: QueryState
    steps: int

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        labels = set(np.unique(self.label_map).tolist()) - {BACKGROUND}
        if not labels <= set(self.surviving.indices):
            raise ValueError("label map references filtered-out queries")


def row_stochastic_error(p: np.ndarray) -> float:
    """Max |row sum - 1| of a similarity matrix."""
    if p.size == 0:
        return 0.0
    return float(np.max(np.abs(p.sum(axis=1) - 1.0)))


def is_row_stochastic(p: np.ndarray, tol: float = 1e-5) -> bool:
    return row_stochastic_error(p) < tol and p.min() >= 0.0 and p.max() <= 1.0 + tol


def resize_bilinear(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of a 2-D grid to (out_h, out_w).

    Uses the pixel-center convention: source coordinate of output pixel i is
    (i + 0.5) * in/out - 0.5, clamped to the valid range.
    """
    a = np.asarray(a, dtype=np.float64)
    in_h, in_w = a.shape
    if (in_h, in_w) == (out_h, out_w):
        return a.copy()

    def axis_coords(n_in, n_out):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0.0, n_in - 1.0)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = c - lo
        return lo, hi, frac

    r0, r1, fr = axis_coords(in_h, out_h)
    c0, c1, fc = axis_coords(in_w, out_w)
    top = a[r0][:, c0] * (1 - fc) + a[r0][:, c1] * fc
    bot = a[r1][:, c0] * (1 - fc) + a[r1][:, c1] * fc
    return top * (1 - fr[:, None]) + bot * fr[:, None]


def save_label_png(path, label_map: np.ndarray) -> None:
    """Write a label map as an 8-bit PNG (BACKGROUND stored as 255)."""
    lm = np.asarray(label_map)
    fg = lm[lm != BACKGROUND]
    if fg.size and (fg.min() < 0 or fg.max() > 254):
        raise ValueError("labels must be in [0, 254] for 8-bit serialization")
    out = np.where(lm == BACKGROUND, BACKGROUND_PNG, lm).astype(np.uint8)
    Image.fromarray(out, mode="L").save(path, format="PNG")


def load_label_png(path) -> np.ndarray:
    """Read an 8-bit label PNG back into a BACKGROUND=-1 label map."""
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"label PNG must be single-channel, got shape {arr.shape}")
    lm = arr.astype(np.int32)
    lm[lm == BACKGROUND_PNG] = BACKGROUND
    return lm


def load_image_png(path) -> np.ndarray:
    """Read any PIL-supported image as an RGB uint8 buffer."""
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.uint8)


def save_image_png(path, image) -> None:
    Image.fromarray(as_image(image), mode="RGB").save(path, format="PNG")
