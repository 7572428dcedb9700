"""CLI entry point: `clip-sidecar --listen host:port [options]`."""

from __future__ import annotations

import argparse
import sys

from .model import DEFAULT_ATTN_LAYERS, DEFAULT_TEMPLATE
from .server import SidecarConfig, serve


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="clip-sidecar",
        description="CLIP model server for the segmentation backend "
                    "wire protocol (v1)")
    parser.add_argument("--proposal-model",
                        default="openai/clip-vit-base-patch16",
                        help="checkpoint for the mask-proposal role")
    parser.add_argument("--classifier-model",
                        default="openai/clip-vit-large-patch14",
                        help="checkpoint for the mask-classifier role")
    parser.add_argument("--listen", default="127.0.0.1:9090",
                        metavar="HOST:PORT")
    parser.add_argument("--half", action="store_true",
                        help="run the models in float16")
    parser.add_argument("--template", default=DEFAULT_TEMPLATE,
                        help="text prompt template; '{}' is the query")
    parser.add_argument("--attn-layers", type=int,
                        default=DEFAULT_ATTN_LAYERS,
                        help="how many final attention layers to return")
    parser.add_argument("--tiny-random", action="store_true",
                        help="serve a small randomly initialized CLIP "
                             "(no downloads; for testing only)")
    args = parser.parse_args(argv)

    host, _, port = args.listen.rpartition(":")
    if not host or not port.isdigit():
        parser.error(f"--listen must be HOST:PORT, got {args.listen!r}")

    serve(SidecarConfig(
        proposal_model=args.proposal_model,
        classifier_model=args.classifier_model,
        host=host, port=int(port), half=args.half,
        template=args.template, attn_layers=args.attn_layers,
        tiny_random=args.tiny_random))
    return 0


if __name__ == "__main__":
    sys.exit(main())
