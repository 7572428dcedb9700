"""CLIP scoring with feature taps: logits, score gradients, attention.

A :class:`ClipScorer` hosts one CLIP checkpoint and exposes exactly what
the segmentation backend protocol needs:

* ``score(image, texts)`` - one logit row (image vs each text);
* ``activations(image, fg_texts, bg_texts)`` - softmax scores over all
  texts, the feature map tapped after the first normalization layer of the
  vision encoder's last block, per-foreground-query gradients of the
  softmax score w.r.t. that feature map (via autograd), and the mean-head
  attention matrices of the last layers with the class token removed.

``from_pretrained`` loads real weights; ``tiny_random`` builds a small
randomly initialized CLIP with a hash tokenizer, so the full code path
runs in tests without any download.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
from PIL import Image

_IMAGE_MEAN = (0.48145466, 0.4578275, 0.40821073)
_IMAGE_STD = (0.26862954, 0.26130258, 0.27577711)

DEFAULT_TEMPLATE = "a photo of {}."
DEFAULT_ATTN_LAYERS = 8

_TINY_VOCAB = 512
_TINY_SEQ = 16


class ClipScorer:
    def __init__(self, model, tokenize, half: bool = False,
                 template: str = DEFAULT_TEMPLATE,
                 attn_layers: int = DEFAULT_ATTN_LAYERS):
        self.model = model.eval()
        self.tokenize = tokenize
        self.half = half
        self.template = template
        self.attn_layers = attn_layers
        if half:
            self.model = self.model.half()
        self._text_cache: dict[tuple[str, ...], dict] = {}

    # -- construction -----------------------------------------------------

    @classmethod
    def from_pretrained(cls, model_id: str, half: bool = False,
                        template: str = DEFAULT_TEMPLATE,
                        attn_layers: int = DEFAULT_ATTN_LAYERS) -> "ClipScorer":
        """Load real weights (requires the checkpoint to be cached or
        reachable)."""
        from transformers import AutoTokenizer, CLIPModel

        model = CLIPModel.from_pretrained(model_id,
                                          attn_implementation="eager")
        tokenizer = AutoTokenizer.from_pretrained(model_id)

        def tokenize(texts):
            batch = tokenizer(texts, padding=True, truncation=True,
                              return_tensors="pt")
            return batch["input_ids"], batch["attention_mask"]

        return cls(model, tokenize, half=half, template=template,
                   attn_layers=attn_layers)

    @classmethod
    def tiny_random(cls, seed: int = 0, half: bool = False,
                    template: str = DEFAULT_TEMPLATE,
                    attn_layers: int = DEFAULT_ATTN_LAYERS) -> "ClipScorer":
        """Small randomly initialized CLIP for offline testing.

        9 vision layers so "the last 8" is a strict suffix; 8x8 patch grid.
        """
        from transformers import (CLIPConfig, CLIPModel, CLIPTextConfig,
                                  CLIPVisionConfig)

        text_cfg = CLIPTextConfig(
            vocab_size=_TINY_VOCAB, hidden_size=32, intermediate_size=64,
            num_hidden_layers=2, num_attention_heads=2,
            max_position_embeddings=_TINY_SEQ,
            bos_token_id=0, eos_token_id=1, pad_token_id=1)
        vision_cfg = CLIPVisionConfig(
            hidden_size=32, intermediate_size=64, num_hidden_layers=9,
            num_attention_heads=2, image_size=64, patch_size=8)
        cfg = CLIPConfig(text_config=text_cfg.to_dict(),
                         vision_config=vision_cfg.to_dict(),
                         projection_dim=16)
        torch.manual_seed(seed)
        model = CLIPModel._from_config(cfg, attn_implementation="eager")
        return cls(model, _hash_tokenize, half=half, template=template,
                   attn_layers=attn_layers)

    # -- preprocessing ----------------------------------------------------

    @property
    def _dtype(self):
        return torch.float16 if self.half else torch.float32

    def _pixels(self, image: np.ndarray) -> torch.Tensor:
        size = self.model.config.vision_config.image_size
        pil = Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB")
        pil = pil.resize((size, size), Image.BICUBIC)
        arr = np.asarray(pil, dtype=np.float32) / 255.0
        arr = (arr - _IMAGE_MEAN) / _IMAGE_STD
        tensor = torch.from_numpy(arr.transpose(2, 0, 1)[None].copy())
        return tensor.to(self._dtype)

    def _text_batch(self, texts: list[str]):
        key = tuple(texts)
        if key not in self._text_cache:
            prompts = [self.template.format(t) if "{}" in self.template
                       else t for t in texts]
            ids, mask = self.tokenize(prompts)
            self._text_cache[key] = {"ids": ids, "mask": mask}
        batch = self._text_cache[key]
        return batch["ids"], batch["mask"]

    # -- scoring ----------------------------------------------------------

    def score(self, image: np.ndarray, texts: list[str]) -> np.ndarray:
        """Logits of one image against each text, shape (len(texts),)."""
        if not texts:
            raise ValueError("texts must be non-empty")
        ids, mask = self._text_batch(list(texts))
        with torch.no_grad():
            out = self.model(input_ids=ids, attention_mask=mask,
                             pixel_values=self._pixels(image))
        return out.logits_per_image[0].float().cpu().numpy()

    def activations(self, image: np.ndarray, fg_texts: list[str],
                    bg_texts: list[str] = ()) -> dict:
        """Scores, tapped features, per-query gradients, attention stack."""
        if not fg_texts:
            raise ValueError("fg_texts must be non-empty")
        texts = list(fg_texts) + list(bg_texts)
        n_fg = len(fg_texts)
        ids, mask = self._text_batch(texts)
        pixels = self._pixels(image)

        tap: dict = {}

        def hook(_module, _inputs, output):
            output.retain_grad()
            tap["features"] = output
            return output

        last_block = self.model.vision_model.encoder.layers[-1]
        handle = last_block.layer_norm1.register_forward_hook(hook)
        try:
            out = self.model(input_ids=ids, attention_mask=mask,
                             pixel_values=pixels, output_attentions=True)
        finally:
            handle.remove()

        scores = out.logits_per_image[0].softmax(dim=-1)
        grid = self._grid_side()
        features = tap["features"]  # (1, 1 + P, hidden)

        grads = []
        for i in range(n_fg):
            g = torch.autograd.grad(scores[i], features,
                                    retain_graph=i < n_fg - 1)[0]
            grads.append(_tokens_to_grid(g, grid))
        feature_grid = _tokens_to_grid(features.detach(), grid)

        attn_stack = []
        for layer in out.vision_model_output.attentions[-self.attn_layers:]:
            mean_heads = layer[0].float().mean(dim=0)  # (1 + P, 1 + P)
            attn_stack.append(mean_heads[1:, 1:].detach().cpu().numpy())

        return {
            "scores": scores[:n_fg].detach().float().cpu().numpy(),
            "features": feature_grid,
            "grads": np.stack(grads, axis=0),
            "attn": np.stack(attn_stack, axis=0).astype(np.float32),
        }

    def _grid_side(self) -> int:
        vision = self.model.config.vision_config
        return vision.image_size // vision.patch_size


def _tokens_to_grid(tokens: torch.Tensor, side: int) -> np.ndarray:
    """(1, 1 + P, hidden) token tensor -> (hidden, side, side) array,
    class token dropped."""
    patches = tokens[0, 1:, :].detach().float().cpu().numpy()
    return patches.reshape(side, side, -1).transpose(2, 0, 1).copy()


def _hash_tokenize(texts: list[str]):
    """Deterministic stand-in tokenizer for the tiny random model."""
    rows = []
    for text in texts:
        words = text.lower().split() or ["empty"]
        tokens = [0]  # bos
        for word in words[:_TINY_SEQ - 2]:
            digest = hashlib.sha256(word.encode()).digest()
            tokens.append(2 + int.from_bytes(digest[:4], "little")
                          % (_TINY_VOCAB - 2))
        tokens.append(1)  # eos
        tokens += [1] * (_TINY_SEQ - len(tokens))
        rows.append(tokens)
    ids = torch.tensor(rows, dtype=torch.long)
    mask = torch.ones_like(ids)
    return ids, mask
