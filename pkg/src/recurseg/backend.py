"""Vision-language scoring backends.

The engine talks to any model through a two-call contract:

* ``score(images, texts)`` -> a logits matrix, one row per image;
* ``activations(image, fg_texts, bg_texts)`` -> feature maps, per-query
  gradients of the softmax scores w.r.t. those features, and a stack
  of non-negative attention matrices.

Real models live behind the wire protocol (see :mod:`recurseg.protocol`);
this module provides the deterministic toy backend used as a known-answer
world for tests. The toy scorer pools color-opponent feature maps with
local-sharpness weights and compares them against per-text templates:

* a text planted in the scene maps to the template of its region color;
* background texts map to templates of the scene's backdrop colors;
* any other text maps to a small seeded-random template, so it scores
  near zero but is not exactly silent (mirroring how irrelevant queries
  still produce noisy activations).

Gradients of the softmax scores are analytic, which makes finite
differences an independent oracle for them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import BinMask, as_image

_BLOCK = 4                 # feature cell size in pixels
_LOGIT_SCALE = 10.0        # temperature applied to template/feature dot products
_ABSENT_AMPLITUDE = 0.35   # template norm for texts unknown to the scene
_BG_AMPLITUDE = 0.6        # template norm for background-role texts
_WEIGHT_FLOOR = 1e-4       # sharpness floor so pooling never degenerates
_TEXTURE = 6               # gray-shift checker amplitude inside planted regions

# color-opponent directions; all rows sum to zero, so gray shifts (and the
# black / gray prompt fills) produce no response
_BASIS = np.array([
    [1, -1, 0], [-1, 1, 0],
    [0, 1, -1], [0, -1, 1],
    [1, 0, -1], [-1, 0, 1],
    [1, -2, 1], [-1, 2, -1],
], dtype=np.float64)
_BASIS /= np.linalg.norm(_BASIS, axis=1, keepdims=True)
N_CHANNELS = len(_BASIS)

PALETTE = (
    ("red", (220, 40, 40)),
    ("green", (40, 220, 40)),
    ("blue", (40, 40, 220)),
    ("yellow", (220, 220, 40)),
    ("cyan", (40, 220, 220)),
    ("magenta", (220, 40, 220)),
)


class BackendError(Exception):
    """Raised when a backend cannot produce scores or activations."""


@dataclass(frozen=True)
class CamBundle:
    """Everything the mask generator needs from one forward/backward pass.

    ``features`` is (K, h, w); ``grads`` is (N, K, h, w) holding the
    gradient of each foreground query's softmax score; ``attn`` stacks L
    non-negative (hw, hw) attention matrices; ``scores`` are the softmax
    values of the foreground texts (background texts absorb the rest).
    """

    features: np.ndarray
    grads: np.ndarray
    attn: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        k, h, w = self.features.shape
        n = self.scores.shape[0]
        if self.grads.shape != (n, k, h, w):
            raise ValueError(f"grads shape {self.grads.shape} != {(n, k, h, w)}")
        if self.attn.ndim != 3 or self.attn.shape[1:] != (h * w, h * w):
            raise ValueError(f"attn shape {self.attn.shape} incompatible with {h}x{w}")
        if self.attn.shape[0] < 1:
            raise ValueError("attention stack must have at least one layer")
        if self.attn.min() < 0:
            raise ValueError("attention entries must be non-negative")

    @property
    def grid(self) -> tuple[int, int]:
        return self.features.shape[1:]


class Backend:
    """Scoring/activation contract every backend implements."""

    kind: str = "abstract"
    capabilities = frozenset({"score", "activations"})
    descriptor: str = ""

    def score(self, images, texts) -> np.ndarray:
        raise NotImplementedError

    def activations(self, image, fg_texts, bg_texts=()) -> CamBundle:
        raise NotImplementedError


@dataclass(frozen=True)
class PlantedConcept:
    text: str
    mask: BinMask
    amplitude: float = 1.0
    color: tuple[int, int, int] | None = None  # None: assigned from PALETTE


@dataclass(frozen=True)
class ToySceneSpec:
    """A procedural scene: colored textured rectangles on a soft gradient.

    The spec doubles as the toy scorer's ground truth: planted texts are
    recognized by the color templates of their regions.
    """

    planted: tuple[PlantedConcept, ...]
    seed: int = 0
    height: int = 64
    width: int = 64
    bg_top: tuple[int, int, int] = (132, 138, 150)
    bg_bottom: tuple[int, int, int] = (150, 144, 132)

    def __post_init__(self):
        texts = [c.text for c in self.planted]
        if len(set(texts)) != len(texts):
            raise ValueError("planted concept texts must be unique")
        for c in self.planted:
            if c.mask.shape != (self.height, self.width):
                raise ValueError("planted mask does not fit the scene")

    @classmethod
    def random(cls, seed: int, n_planted: int = 3,
               size: int = 64) -> "ToySceneSpec":
        """Deterministic scene with ``n_planted`` non-overlapping regions."""
        if not 0 <= n_planted <= len(PALETTE):
            raise ValueError(f"n_planted must be in [0, {len(PALETTE)}]")
        rng = np.random.default_rng(seed)
        # primaries have disjoint opponent-channel signatures; the secondary
        # colors cross-talk with them, so stay within RGB when possible
        pool = max(3, n_planted)
        order = rng.permutation(pool)[:n_planted]
        placed: list[tuple[int, int, int, int]] = []
        concepts = []
        for idx in order:
            name, color = PALETTE[idx]
            rect = _place_rect(rng, size, placed)
            placed.append(rect)
            r0, c0, r1, c1 = rect
            m = np.zeros((size, size), dtype=bool)
            m[r0:r1 + 1, c0:c1 + 1] = True
            concepts.append(PlantedConcept(text=f"{name} block",
                                           mask=BinMask.from_array(m),
                                           amplitude=1.0, color=color))
        jit = rng.integers(-6, 7, size=6)
        top = tuple(int(np.clip(v + j, 100, 180))
                    for v, j in zip((132, 138, 150), jit[:3]))
        bot = tuple(int(np.clip(v + j, 100, 180))
                    for v, j in zip((150, 144, 132), jit[3:]))
        return cls(planted=tuple(concepts), seed=seed,
                   height=size, width=size, bg_top=top, bg_bottom=bot)

    def concept_color(self, i: int) -> tuple[int, int, int]:
        c = self.planted[i]
        if c.color is not None:
            return c.color
        return PALETTE[i % len(PALETTE)][1]

    def render(self) -> np.ndarray:
        """Rasterize the scene to an RGB image."""
        h, w = self.height, self.width
        rr = np.arange(h, dtype=np.float64)[:, None] / max(h - 1, 1)
        cc = np.arange(w, dtype=np.float64)[None, :] / max(w - 1, 1)
        u = (0.8 * rr + 0.2 * cc)[..., None]
        top = np.asarray(self.bg_top, dtype=np.float64)
        bot = np.asarray(self.bg_bottom, dtype=np.float64)
        img = top + u * (bot - top)
        checker = (((np.arange(h)[:, None] + np.arange(w)[None, :]) % 2) * 2 - 1)
        for i, concept in enumerate(self.planted):
            color = np.asarray(self.concept_color(i), dtype=np.float64)
            region = concept.mask.mask
            tex = color[None, :] + _TEXTURE * checker[region, None]
            img[region] = tex
        return np.clip(np.round(img), 0, 255).astype(np.uint8)


def _place_rect(rng, size, placed, margin=5):
    lo_extent, hi_extent = 12, 22
    for attempt in range(300):
        if attempt and attempt % 60 == 0 and lo_extent > 8:
            lo_extent -= 2
            hi_extent -= 3
        hh = int(rng.integers(lo_extent, hi_extent + 1))
        ww = int(rng.integers(lo_extent, hi_extent + 1))
        r0 = int(rng.integers(2, size - 2 - hh))
        c0 = int(rng.integers(2, size - 2 - ww))
        rect = (r0, c0, r0 + hh - 1, c0 + ww - 1)
        if all(not _rects_touch(rect, other, margin) for other in placed):
            return rect
    raise ValueError("could not place scene regions; reduce n_planted")


def _rects_touch(a, b, margin):
    ar0, ac0, ar1, ac1 = a
    br0, bc0, br1, bc1 = b
    return not (ar1 + margin < br0 or br1 + margin < ar0
                or ac1 + margin < bc0 or bc1 + margin < ac0)


def _hash64(*parts) -> int:
    payload = "\x1f".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n < 1e-12:
        return np.zeros_like(v)
    return v / n


def color_response(color) -> np.ndarray:
    """Per-channel response of a single RGB color (the template direction)."""
    c = np.asarray(color, dtype=np.float64)
    return np.maximum(_BASIS @ c, 0.0) / 128.0


def toy_features(image) -> tuple[np.ndarray, np.ndarray]:
    """Color-opponent feature maps plus sharpness pooling weights.

    Returns ``(features, weights)`` where features has shape (K, h, w) with
    h = H // 4, w = W // 4, and weights is the (h, w) pooling field derived
    from local luma contrast (blur-sensitive, gray-shift-sensitive).
    """
    img = as_image(image)
    h_px, w_px = img.shape[:2]
    if h_px < _BLOCK or w_px < _BLOCK:
        raise BackendError(f"toy backend needs images of at least "
                           f"{_BLOCK}x{_BLOCK} pixels, got {h_px}x{w_px}")
    h, w = h_px // _BLOCK, w_px // _BLOCK
    crop = img[:h * _BLOCK, :w * _BLOCK].astype(np.float64)

    resp = np.maximum(np.einsum("xyc,kc->kxy", crop, _BASIS), 0.0) / 128.0
    feats = resp.reshape(N_CHANNELS, h, _BLOCK, w, _BLOCK).mean(axis=(2, 4))

    luma = crop @ np.array([0.299, 0.587, 0.114])
    local_mean = ndimage.uniform_filter(luma, size=3, mode="nearest")
    contrast = np.abs(luma - local_mean) / 255.0
    weights = contrast.reshape(h, _BLOCK, w, _BLOCK).mean(axis=(1, 3))
    return feats, weights + _WEIGHT_FLOOR


class ToyBackend(Backend):
    """Deterministic oracle backend over a :class:`ToySceneSpec`."""

    kind = "toy"

    def __init__(self, scene: ToySceneSpec, n_attn_layers: int = 8):
        if n_attn_layers < 1:
            raise ValueError("n_attn_layers must be >= 1")
        self.scene = scene
        self.n_attn_layers = n_attn_layers
        self.descriptor = f"toy:seed={scene.seed}"
        self._planted_templates = {
            c.text: c.amplitude * _unit(color_response(scene.concept_color(i)))
            for i, c in enumerate(scene.planted)
        }
        self._template_cache: dict[tuple[str, str], np.ndarray] = {}

    # -- template construction ------------------------------------------

    def _template(self, text: str, role: str = "fg") -> np.ndarray:
        key = (role, text)
        cached = self._template_cache.get(key)
        if cached is None:
            cached = self._template_cache[key] = self._build_template(text, role)
        return cached

    def _build_template(self, text: str, role: str) -> np.ndarray:
        if role == "bg":
            u = (_hash64(self.scene.seed, "bg", text) % 2 ** 32) / 2 ** 32
            top = np.asarray(self.scene.bg_top, dtype=np.float64)
            bot = np.asarray(self.scene.bg_bottom, dtype=np.float64)
            direction = _unit(color_response(top + u * (bot - top)))
            if not direction.any():
                direction = np.full(N_CHANNELS, 1.0 / np.sqrt(N_CHANNELS))
            return _BG_AMPLITUDE * direction
        if text in self._planted_templates:
            return self._planted_templates[text]
        if not text.strip():
            # empty text is the zero-response probe
            return np.zeros(N_CHANNELS)
        rng = np.random.default_rng(_hash64(self.scene.seed, "absent", text))
        return _ABSENT_AMPLITUDE * _unit(rng.random(N_CHANNELS))

    def _templates(self, fg_texts, bg_texts=()) -> np.ndarray:
        rows = [self._template(t, "fg") for t in fg_texts]
        rows += [self._template(t, "bg") for t in bg_texts]
        return np.stack(rows, axis=0)

    # -- contract ---------------------------------------------------------

    def score(self, images, texts) -> np.ndarray:
        if not len(images):
            raise ValueError("images must be non-empty")
        if not len(texts):
            raise ValueError("texts must be non-empty")
        templates = self._templates(texts)
        out = np.empty((len(images), len(texts)), dtype=np.float64)
        for i, image in enumerate(images):
            feats, weights = toy_features(image)
            pooled = _pool(feats, weights)
            out[i] = _LOGIT_SCALE * (templates @ pooled)
        return out.astype(np.float32)

    def activations(self, image, fg_texts, bg_texts=()) -> CamBundle:
        if not len(fg_texts):
            raise ValueError("fg_texts must be non-empty")
        n_fg = len(fg_texts)
        templates = self._templates(fg_texts, bg_texts)
        feats, weights = toy_features(image)
        pooled = _pool(feats, weights)
        scores = _softmax(_LOGIT_SCALE * (templates @ pooled))

        # d s_i / d A^k_xy = scale * (w_xy / sum w) * s_i (tau_i[k] - tau_bar[k])
        tau_bar = scores @ templates
        coeff = _LOGIT_SCALE * scores[:n_fg, None] * (templates[:n_fg] - tau_bar)
        wfield = weights / weights.sum()
        grads = coeff[:, :, None, None] * wfield[None, None, :, :]

        h, w = feats.shape[1:]
        attn = self._attention(h, w)
        return CamBundle(features=feats.astype(np.float32),
                         grads=grads.astype(np.float32),
                         attn=attn,
                         scores=scores[:n_fg].astype(np.float32))

    def _attention(self, h: int, w: int) -> np.ndarray:
        return _proximity_attention(h, w, self.n_attn_layers)


_ATTENTION_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def _proximity_attention(h: int, w: int, n_layers: int) -> np.ndarray:
    """Row-normalized spatial-proximity kernels; CAA over these acts as
    pure local smoothing. Scene-independent, so cached per grid size."""
    key = (h, w, n_layers)
    if key not in _ATTENTION_CACHE:
        rr, cc = np.mgrid[0:h, 0:w]
        pos = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)
        d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
        layers = []
        for layer in range(n_layers):
            sigma = 1.0 + 0.35 * layer
            m = np.exp(-d2 / (2.0 * sigma * sigma))
            layers.append(m / m.sum(axis=1, keepdims=True))
        _ATTENTION_CACHE[key] = np.stack(layers).astype(np.float32)
    return _ATTENTION_CACHE[key]


def _pool(feats: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return (feats * weights).sum(axis=(1, 2)) / weights.sum()


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def toy_finite_diff_grads(scene: ToySceneSpec, image, texts,
                          eps: float = 1e-4) -> np.ndarray:
    """Central-difference estimate of the toy softmax-score gradients.

    Re-derives the score pipeline from the scene spec independently of
    :meth:`ToyBackend.activations`, perturbing each feature cell by
    ``+/- eps``. Returns float64 grads of shape (N, K, h, w).
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    backend = ToyBackend(scene)
    templates = backend._templates(texts)
    feats, weights = toy_features(image)
    k, h, w = feats.shape
    wsum = weights.sum()

    def scores_of(a: np.ndarray) -> np.ndarray:
        pooled = (a * weights).sum(axis=(1, 2)) / wsum
        return _softmax(_LOGIT_SCALE * (templates @ pooled))

    grads = np.empty((len(texts), k, h, w), dtype=np.float64)
    work = feats.copy()
    for ki in range(k):
        for xi in range(h):
            for yi in range(w):
                orig = work[ki, xi, yi]
                work[ki, xi, yi] = orig + eps
                s_plus = scores_of(work)
                work[ki, xi, yi] = orig - eps
                s_minus = scores_of(work)
                work[ki, xi, yi] = orig
                grads[:, ki, xi, yi] = (s_plus - s_minus) / (2.0 * eps)
    return grads


# --- scene (de)serialization and backend resolution ------------------------

def scene_to_json(scene: ToySceneSpec) -> str:
    planted = []
    for i, c in enumerate(scene.planted):
        bb = c.mask.bbox()
        full_rect = bb is not None and c.mask.area == \
            (bb[2] - bb[0] + 1) * (bb[3] - bb[1] + 1)
        if not full_rect:
            raise ValueError("only rectangular planted masks serialize to JSON")
        planted.append({"text": c.text, "rect": list(bb),
                        "amplitude": c.amplitude,
                        "color": list(scene.concept_color(i))})
    return json.dumps({
        "seed": scene.seed, "height": scene.height, "width": scene.width,
        "bg_top": list(scene.bg_top), "bg_bottom": list(scene.bg_bottom),
        "planted": planted,
    }, indent=2)


def scene_from_json(text: str) -> ToySceneSpec:
    data = json.loads(text)
    concepts = []
    for item in data.get("planted", []):
        r0, c0, r1, c1 = item["rect"]
        m = np.zeros((data["height"], data["width"]), dtype=bool)
        m[r0:r1 + 1, c0:c1 + 1] = True
        concepts.append(PlantedConcept(
            text=item["text"], mask=BinMask.from_array(m),
            amplitude=item.get("amplitude", 1.0),
            color=tuple(item["color"]) if "color" in item else None))
    return ToySceneSpec(
        planted=tuple(concepts), seed=data.get("seed", 0),
        height=data["height"], width=data["width"],
        bg_top=tuple(data.get("bg_top", (132, 138, 150))),
        bg_bottom=tuple(data.get("bg_bottom", (150, 144, 132))))


def parse_backend(descriptor: str) -> Backend:
    """Resolve ``toy:...`` / ``remote:host:port`` descriptors to backends.

    Toy options: ``toy:seed=7`` (empty scene) or ``toy:seed=7,scene=FILE``
    to load a scene JSON.
    """
    if descriptor.startswith("toy"):
        seed, scene_path = 0, None
        rest = descriptor[4:] if descriptor.startswith("toy:") else ""
        for part in filter(None, rest.split(",")):
            key, _, val = part.partition("=")
            if key == "seed":
                seed = int(val)
            elif key == "scene":
                scene_path = val
            else:
                raise BackendError(f"unknown toy backend option {key!r}")
        if scene_path is not None:
            scene = scene_from_json(Path(scene_path).read_text())
        else:
            scene = ToySceneSpec(planted=(), seed=seed)
        return ToyBackend(scene)
    if descriptor.startswith("remote:"):
        from .protocol import RemoteBackend
        rest = descriptor[len("remote:"):]
        host, _, port = rest.rpartition(":")
        if not host or not port.isdigit():
            raise BackendError(f"remote descriptor must be remote:host:port, "
                               f"got {descriptor!r}")
        return RemoteBackend(host, int(port))
    raise BackendError(f"unknown backend descriptor {descriptor!r}")
