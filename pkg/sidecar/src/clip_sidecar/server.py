"""Protocol server: routes score/activations requests to CLIP scorers.

One process can host two checkpoints - a proposal-side encoder (used for
``activations``) and a classifier-side encoder (used for ``score``).
Requests may carry an explicit ``role`` to override that default routing.
Each connection is served in its own thread; requests within a connection
are answered strictly in order. Error replies (``{"ok": false, ...}``)
keep the connection open.
"""

from __future__ import annotations

import socketserver
import threading
from dataclasses import dataclass


from .framing import (PROTOCOL_VERSION, FrameError, decode_image,
                      encode_array, read_frame, write_frame)
from .model import DEFAULT_ATTN_LAYERS, DEFAULT_TEMPLATE, ClipScorer


@dataclass
class SidecarConfig:
    proposal_model: str = "openai/clip-vit-base-patch16"
    classifier_model: str = "openai/clip-vit-large-patch14"
    host: str = "127.0.0.1"
    port: int = 9090
    half: bool = False
    template: str = DEFAULT_TEMPLATE
    attn_layers: int = DEFAULT_ATTN_LAYERS
    tiny_random: bool = False  # build tiny random models instead of loading


def load_scorers(cfg: SidecarConfig) -> dict:
    """Resolve the two roles; identical ids share one model instance."""
    if cfg.tiny_random:
        shared = ClipScorer.tiny_random(seed=0, half=cfg.half,
                                        template=cfg.template,
                                        attn_layers=cfg.attn_layers)
        return {"proposal": shared, "classifier": shared}
    proposal = ClipScorer.from_pretrained(cfg.proposal_model, half=cfg.half,
                                          template=cfg.template,
                                          attn_layers=cfg.attn_layers)
    if cfg.classifier_model == cfg.proposal_model:
        classifier = proposal
    else:
        classifier = ClipScorer.from_pretrained(cfg.classifier_model,
                                                half=cfg.half,
                                                template=cfg.template,
                                                attn_layers=cfg.attn_layers)
    return {"proposal": proposal, "classifier": classifier}


def answer(scorers: dict, request: dict) -> dict:
    """One reply frame for one request frame."""
    if request.get("v") != PROTOCOL_VERSION:
        return {"ok": False,
                "err": f"unsupported protocol version {request.get('v')!r}"}
    op = request.get("op")
    try:
        if op == "score":
            scorer = scorers[request.get("role", "classifier")]
            image = decode_image(request["image_png_b64"])
            texts = list(request.get("fg_texts", ()))
            logits = scorer.score(image, texts)
            return {"v": PROTOCOL_VERSION, "ok": True,
                    "logits": [logits.astype(float).tolist()]}
        if op == "activations":
            scorer = scorers[request.get("role", "proposal")]
            image = decode_image(request["image_png_b64"])
            fg = list(request.get("fg_texts", ()))
            bg = list(request.get("bg_texts", ()))
            result = scorer.activations(image, fg, bg)
            k, h, w = result["features"].shape
            return {
                "v": PROTOCOL_VERSION, "ok": True,
                "scores": result["scores"].astype(float).tolist(),
                "features_b64": encode_array(result["features"]),
                "grads_b64": encode_array(result["grads"]),
                "attn_b64": encode_array(result["attn"]),
                "shape": {"k": k, "h": h, "w": w,
                          "n": int(result["grads"].shape[0]),
                          "l": int(result["attn"].shape[0])},
            }
        if op is None:
            return {"ok": False, "err": "missing op"}
        return {"ok": False, "err": f"unknown op {op!r}"}
    except KeyError as exc:
        return {"ok": False, "err": f"missing field {exc}"}
    except (ValueError, RuntimeError) as exc:
        return {"ok": False, "err": str(exc)}


def serve_connection(scorers: dict, rfile, wfile) -> None:
    while True:
        try:
            request = read_frame(rfile)
        except FrameError as exc:
            write_frame(wfile, {"ok": False, "err": str(exc)})
            continue
        if request is None:
            return
        write_frame(wfile, answer(scorers, request))


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        serve_connection(self.server.scorers,  # type: ignore[attr-defined]
                         self.rfile, self.wfile)


class SidecarServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, scorers: dict, host: str, port: int):
        super().__init__((host, port), _Handler)
        self.scorers = scorers

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def serve_in_thread(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread


def serve(cfg: SidecarConfig) -> None:
    """Load models and serve until interrupted."""
    scorers = load_scorers(cfg)
    server = SidecarServer(scorers, cfg.host, cfg.port)
    host, port = server.address
    mode = "tiny-random" if cfg.tiny_random else \
        f"{cfg.proposal_model} / {cfg.classifier_model}"
    print(f"clip-sidecar serving {mode} on {host}:{port} "
          f"(half={cfg.half}, template={cfg.template!r})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
