"""Evaluation: mIoU over label maps, DAVIS-style J and F, dataset manifests.

Metrics accumulate per-class intersection/union counts, so evaluation can
be distributed over images and merged (the merge is associative and
commutative). Boundary accuracy F uses distance-tolerant matching of
4-neighbor boundary pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import BACKGROUND, as_image, as_mask_array


@dataclass
class ConfusionAccumulator:
    """Per-class intersection and union counts, mergeable across images."""

    num_classes: int
    intersection: np.ndarray = field(default=None)  # type: ignore[assignment]
    union: np.ndarray = field(default=None)  # type: ignore[assignment]
    n_images: int = 0

    def __post_init__(self):
        if self.intersection is None:
            self.intersection = np.zeros(self.num_classes, dtype=np.int64)
        if self.union is None:
            self.union = np.zeros(self.num_classes, dtype=np.int64)

    def update(self, pred, gt) -> None:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
        for arr, name in ((pred, "pred"), (gt, "gt")):
            if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
                raise ValueError(f"{name} labels out of range "
                                 f"[0, {self.num_classes})")
        for c in range(self.num_classes):
            p = pred == c
            g = gt == c
            self.intersection[c] += int(np.logical_and(p, g).sum())
            self.union[c] += int(np.logical_or(p, g).sum())
        self.n_images += 1

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge accumulators of different sizes")
        return ConfusionAccumulator(
            num_classes=self.num_classes,
            intersection=self.intersection + other.intersection,
            union=self.union + other.union,
            n_images=self.n_images + other.n_images)

    def report(self, fingerprint: str | None = None) -> "MetricReport":
        per_class = tuple(
            float(i) / u if u > 0 else None
            for i, u in zip(self.intersection, self.union))
        present = [v for v in per_class if v is not None]
        miou_val = float(np.mean(present)) if present else 0.0
        return MetricReport(
            per_class_iou=per_class, miou=miou_val,
            class_counts=tuple((int(i), int(u)) for i, u in
                               zip(self.intersection, self.union)),
            n_images=self.n_images, fingerprint=fingerprint)


@dataclass
class MetricReport:
    """Per-class IoU, their mean, and optional boundary metrics.

    Classes absent from both predictions and ground truth (zero union over
    the whole dataset) carry ``None`` and are excluded from the mean.
    """

    per_class_iou: tuple
    miou: float
    class_counts: tuple[tuple[int, int], ...]
    n_images: int
    j_mean: float | None = None
    f_mean: float | None = None
    jf_mean: float | None = None
    fingerprint: str | None = None

    def to_json(self) -> str:
        return json.dumps({
            "per_class_iou": list(self.per_class_iou),
            "miou": self.miou,
            "class_counts": [list(c) for c in self.class_counts],
            "n_images": self.n_images,
            "j_mean": self.j_mean,
            "f_mean": self.f_mean,
            "jf_mean": self.jf_mean,
            "fingerprint": self.fingerprint,
        })

    def to_table(self, class_names=None) -> str:
        names = class_names or [f"class {i}" for i in
                                range(len(self.per_class_iou))]
        width = max(len(n) for n in names) + 2
        lines = [f"{'class':<{width}}{'IoU':>8}"]
        for name, iou_val in zip(names, self.per_class_iou):
            shown = "  --  " if iou_val is None else f"{iou_val:.4f}"
            lines.append(f"{name:<{width}}{shown:>8}")
        lines.append(f"{'mIoU':<{width}}{self.miou:>8.4f}")
        if self.jf_mean is not None:
            lines.append(f"{'J&F':<{width}}{self.jf_mean:>8.4f}")
        return "\n".join(lines)


def miou(preds, gts, num_classes: int,
         fingerprint: str | None = None) -> MetricReport:
    """Dataset mIoU: accumulate per-class counts over all pairs, then
    average IoU over classes that appear at all."""
    acc = ConfusionAccumulator(num_classes)
    for pred, gt in zip(preds, gts):
        acc.update(pred, gt)
    return acc.report(fingerprint=fingerprint)


def region_j(pred, gt) -> float:
    """Region similarity: IoU of two binary masks; 1.0 when both empty."""
    p = as_mask_array(pred)
    g = as_mask_array(gt)
    if p.shape != g.shape:
        raise ValueError("mask shapes differ")
    union = int(np.logical_or(p, g).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(p, g).sum()) / union


def mask_boundary(mask) -> np.ndarray:
    """Mask pixels whose 4-neighborhood (within the image) is not uniform."""
    m = as_mask_array(mask)
    differs = np.zeros_like(m)
    differs[1:, :] |= m[1:, :] != m[:-1, :]
    differs[:-1, :] |= m[:-1, :] != m[1:, :]
    differs[:, 1:] |= m[:, 1:] != m[:, :-1]
    differs[:, :-1] |= m[:, :-1] != m[:, 1:]
    return m & differs


def default_boundary_tolerance(shape: tuple[int, int]) -> int:
    """DAVIS-style tolerance: 0.8% of the image diagonal, rounded."""
    h, w = shape
    return int(round(0.008 * float(np.hypot(h, w))))


def contour_f(pred, gt, tol_px: int | None = None) -> float:
    """Boundary F-measure with distance-tolerant matching.

    A predicted boundary pixel counts as correct when a ground-truth
    boundary pixel lies within ``tol_px`` (Euclidean), and vice versa;
    F is the harmonic mean of the two rates.
    """
    p = as_mask_array(pred)
    g = as_mask_array(gt)
    if p.shape != g.shape:
        raise ValueError("mask shapes differ")
    if tol_px is None:
        tol_px = default_boundary_tolerance(p.shape)
    if tol_px < 0:
        raise ValueError("tol_px must be >= 0")
    pb = mask_boundary(p)
    gb = mask_boundary(g)
    n_pb = int(pb.sum())
    n_gb = int(gb.sum())
    if n_pb == 0 and n_gb == 0:
        return 1.0
    if n_pb == 0 or n_gb == 0:
        return 0.0
    dist_to_g = ndimage.distance_transform_edt(~gb)
    dist_to_p = ndimage.distance_transform_edt(~pb)
    precision = float((dist_to_g[pb] <= tol_px).sum()) / n_pb
    recall = float((dist_to_p[gb] <= tol_px).sum()) / n_gb
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def jf_mean(pred, gt, tol_px: int | None = None) -> tuple[float, float, float]:
    """Convenience (J, F, (J+F)/2) for one mask pair."""
    j = region_j(pred, gt)
    f = contour_f(pred, gt, tol_px)
    return j, f, (j + f) / 2.0


# --- dataset manifests ------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    image_path: Path
    gt_path: Path | None
    queries: tuple[str, ...]
    split: str = ""


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]

    def __len__(self):
        return len(self.entries)


def load_manifest(path) -> DatasetManifest:
    """Read a JSONL manifest: one entry per line with keys ``image``,
    optional ``gt``, ``queries`` (list or single referring string), and
    optional ``split``. Relative paths resolve against the manifest."""
    p = Path(path)
    base = p.parent
    entries = []
    with open(p, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{p}: line {lineno}: {exc}") from None
            if not isinstance(data, dict) or "image" not in data:
                raise ValueError(f"{p}: line {lineno}: entry must be an "
                                 f"object with an 'image' key")
            queries = data.get("queries", [])
            if isinstance(queries, str):
                queries = [queries]
            if not queries:
                raise ValueError(f"{p}: line {lineno}: queries must be "
                                 f"non-empty")
            gt = data.get("gt")
            entries.append(ManifestEntry(
                image_path=(base / data["image"]).resolve(),
                gt_path=(base / gt).resolve() if gt else None,
                queries=tuple(str(q) for q in queries),
                split=str(data.get("split", ""))))
    return DatasetManifest(entries=tuple(entries))


# --- overlays ----------------------------------------------------------------

def label_palette(n: int = 256) -> np.ndarray:
    """Deterministic color table (the classic bit-reversal colormap)."""
    cmap = np.zeros((n, 3), dtype=np.uint8)
    for i in range(n):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        cmap[i] = (r, g, b)
    return cmap


def render_overlay(image, label_map, palette: np.ndarray | None = None,
                   alpha: float = 0.55) -> np.ndarray:
    """Alpha-blend label colors over the image; background stays as-is.

    Label ``i`` uses palette entry ``i + 1`` (entry 0 is reserved black).
    """
    img = as_image(image)
    lm = np.asarray(label_map)
    if lm.shape != img.shape[:2]:
        raise ValueError("label map shape does not match image")
    if palette is None:
        palette = label_palette()
    out = img.astype(np.float64)
    fg = lm != BACKGROUND
    if fg.any():
        colors = palette[(lm[fg] + 1) % len(palette)].astype(np.float64)
        out[fg] = (1.0 - alpha) * out[fg] + alpha * colors
    return np.clip(np.round(out), 0, 255).astype(np.uint8)
