"""Command-line front end.

Subcommands: ``run`` (segment images), ``eval`` (score predictions),
``prompts-demo`` (render the prompt menu), ``backend-check`` (probe a
backend). Exit codes: 0 success, 2 configuration or usage error,
3 backend error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .backend import BackendError, ToySceneSpec, parse_backend
from .config import (ConfigError, PipelineConfig, load_bg_set,
                     load_config, validate_config)
from .core import (BACKGROUND, load_image_png, load_label_png,
                   save_image_png, save_label_png)
from .metrics import (ConfusionAccumulator, contour_f, load_manifest,
                      region_j, render_overlay)
from .pipeline import segment_image
from .postproc import load_proposals
from .prompter import PROMPT_TYPES, PromptSpec, apply_visual_prompts
from .recurrence import write_trace

DEFAULT_BACKEND_ENV = "CAR_BACKEND"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recurseg",
        description="Training-free recurrent open-vocabulary segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="segment images")
    p_run.add_argument("--image", type=Path, help="single input image")
    p_run.add_argument("--manifest", type=Path, help="JSONL manifest of inputs")
    p_run.add_argument("--queries", help="comma-separated text queries "
                                         "(single-image mode)")
    p_run.add_argument("--config", type=Path, help="pipeline config file")
    p_run.add_argument("--backend", help="toy:seed=N[,scene=FILE] or "
                                         "remote:host:port (default: "
                                         "$CAR_BACKEND or toy:seed=0)")
    p_run.add_argument("--eta", type=float, help="mask binarization threshold")
    p_run.add_argument("--theta", type=float, help="query filter threshold")
    p_run.add_argument("--lambda", dest="lam", type=float,
                       help="CAM box threshold")
    p_run.add_argument("--prompts", help="comma-separated prompt types "
                                         f"({','.join(PROMPT_TYPES)})")
    p_run.add_argument("--bg-set", choices=["none", "terrestrial", "aquatic",
                                            "manmade", "all"],
                       help="background query list")
    p_run.add_argument("--crf", action=argparse.BooleanOptionalAction,
                       default=True, help="dense-CRF refinement (default on)")
    p_run.add_argument("--sam-proposals", type=Path,
                       help="directory or indexed PNG of external proposals")
    p_run.add_argument("--dump-prompts", action="store_true",
                       help="write prompted images per step")
    p_run.add_argument("--trace", action="store_true",
                       help="write the recurrence trace as JSONL")
    p_run.add_argument("--save-soft", action="store_true",
                       help="write final soft masks as .npy")
    p_run.add_argument("--jobs", type=int, default=1,
                       help="parallel workers for manifest entries")
    p_run.add_argument("--out", type=Path, required=True,
                       help="output directory")
    p_run.set_defaults(func=cmd_run)

    p_eval = sub.add_parser("eval", help="score predictions against a manifest")
    p_eval.add_argument("--manifest", type=Path, required=True)
    p_eval.add_argument("--pred", type=Path, required=True,
                        help="directory of <stem>_labels.png predictions")
    p_eval.add_argument("--classes", type=int,
                        help="number of classes incl. background "
                             "(default: inferred)")
    p_eval.add_argument("--jf", action="store_true",
                        help="also report J&F over binary foreground")
    p_eval.add_argument("--out", type=Path, help="write the report JSON here")
    p_eval.set_defaults(func=cmd_eval)

    p_demo = sub.add_parser("prompts-demo",
                            help="render each visual prompt type")
    p_demo.add_argument("--out", type=Path, required=True)
    p_demo.add_argument("--image", type=Path, help="optional input image")
    p_demo.add_argument("--mask", type=Path,
                        help="optional binary mask PNG (white = region)")
    p_demo.set_defaults(func=cmd_prompts_demo)

    p_check = sub.add_parser("backend-check", help="probe a backend")
    p_check.add_argument("--backend", help="backend descriptor")
    p_check.set_defaults(func=cmd_backend_check)
    return parser


def _resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    overrides = {}
    for name in ("eta", "theta", "lam"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "prompts", None):
        overrides["prompt_types"] = tuple(
            t.strip() for t in args.prompts.split(",") if t.strip())
    if getattr(args, "bg_set", None):
        overrides["bg_queries"] = load_bg_set(args.bg_set)
    if overrides:
        cfg = replace(cfg, **overrides)
    errors = validate_config(cfg)
    if errors:
        raise ConfigError("; ".join(errors))
    return cfg


def _resolve_backend(args):
    descriptor = (getattr(args, "backend", None)
                  or os.environ.get(DEFAULT_BACKEND_ENV)
                  or "toy:seed=0")
    return parse_backend(descriptor), descriptor


def _entry_proposals(path: Path | None, stem: str, shape):
    if path is None:
        return None
    candidates = [path / stem, path / f"{stem}.png", path]
    for cand in candidates:
        if cand.exists():
            return load_proposals(cand, shape)
    raise FileNotFoundError(f"no proposals found for {stem!r} under {path}")


def _process_entry(image_path: Path, queries, backend, cfg, args) -> None:
    image = load_image_png(image_path)
    stem = image_path.stem
    out: Path = args.out
    sink = None
    if args.dump_prompts:
        prompt_dir = out / "prompts"
        prompt_dir.mkdir(parents=True, exist_ok=True)

        def sink(step, entry, rendered, _stem=stem, _dir=prompt_dir):
            idx, _text = entry
            save_image_png(_dir / f"{_stem}_step{step}_q{idx}.png", rendered)

    proposals = _entry_proposals(args.sam_proposals, stem, image.shape[:2])
    result, traces = segment_image(backend, image, list(queries), cfg,
                                   use_crf=args.crf, proposals=proposals,
                                   prompt_sink=sink)
    save_label_png(out / f"{stem}_labels.png", result.label_map)
    save_image_png(out / f"{stem}_overlay.png",
                   render_overlay(image, result.label_map))
    if args.save_soft:
        np.save(out / f"{stem}_soft.npy", result.soft_masks)
        meta = {"queries": [[i, t] for i, t in result.surviving.entries],
                "steps": result.steps}
        (out / f"{stem}_soft.json").write_text(json.dumps(meta) + "\n")
    if args.trace:
        write_trace(out / f"{stem}_trace.jsonl", traces)


def cmd_run(args) -> int:
    if bool(args.image) == bool(args.manifest):
        raise ConfigError("provide exactly one of --image or --manifest")
    cfg = _resolve_config(args)
    backend, descriptor = _resolve_backend(args)
    args.out.mkdir(parents=True, exist_ok=True)

    if args.image:
        if not args.queries:
            raise ConfigError("--queries is required with --image")
        queries = [q.strip() for q in args.queries.split(",") if q.strip()]
        _process_entry(args.image, queries, backend, cfg, args)
        return 0

    manifest = load_manifest(args.manifest)
    entries = list(manifest.entries)

    def work(entry):
        # remote connections serialize requests; give each worker its own
        worker_backend = backend if args.jobs == 1 else \
            parse_backend(descriptor)
        _process_entry(entry.image_path, entry.queries, worker_backend,
                       cfg, args)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(work, entries))
    else:
        for entry in entries:
            work(entry)
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    pairs = []
    for entry in manifest.entries:
        if entry.gt_path is None:
            raise ConfigError(f"manifest entry {entry.image_path.name} has "
                              f"no ground truth")
        pred_path = args.pred / f"{entry.image_path.stem}_labels.png"
        for path in (pred_path, entry.gt_path):
            if not path.exists():
                raise FileNotFoundError(f"missing file: {path}")
        pairs.append((load_label_png(pred_path), load_label_png(entry.gt_path)))

    # map BACKGROUND to class 0, query index i to class i + 1
    def to_classes(lm):
        out = lm + 1
        out[lm == BACKGROUND] = 0
        return out

    mapped = [(to_classes(p), to_classes(g)) for p, g in pairs]
    if args.classes is not None:
        num_classes = args.classes
    else:
        num_classes = 1 + max(int(arr.max()) for pair in mapped
                              for arr in pair)
    acc = ConfusionAccumulator(num_classes)
    for pred, gt in mapped:
        acc.update(pred, gt)
    report = acc.report()

    if args.jf:
        js, fs = [], []
        for pred, gt in pairs:
            js.append(region_j(pred != BACKGROUND, gt != BACKGROUND))
            fs.append(contour_f(pred != BACKGROUND, gt != BACKGROUND))
        report.j_mean = float(np.mean(js))
        report.f_mean = float(np.mean(fs))
        report.jf_mean = float((report.j_mean + report.f_mean) / 2.0)

    print(report.to_table())
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(report.to_json() + "\n")
    return 0


def cmd_prompts_demo(args) -> int:
    if args.image:
        image = load_image_png(args.image)
        if args.mask:
            from PIL import Image
            mask = np.asarray(Image.open(args.mask).convert("L")) > 127
        else:
            h, w = image.shape[:2]
            mask = np.zeros((h, w), dtype=bool)
            mask[h // 4:3 * h // 4, w // 4:3 * w // 4] = True
    else:
        scene = ToySceneSpec.random(seed=0, n_planted=1)
        image = scene.render()
        mask = scene.planted[0].mask.mask
    args.out.mkdir(parents=True, exist_ok=True)
    for ptype in PROMPT_TYPES:
        rendered = apply_visual_prompts(image, mask,
                                        PromptSpec(types=(ptype,)))
        save_image_png(args.out / f"prompt_{ptype}.png", rendered)
    print(f"wrote {len(PROMPT_TYPES)} prompt renderings to {args.out}")
    return 0


def cmd_backend_check(args) -> int:
    backend, descriptor = _resolve_backend(args)
    scene = ToySceneSpec.random(seed=0, n_planted=1)
    image = scene.render()
    texts = ["first probe", "second probe"]

    t0 = time.perf_counter()
    logits = backend.score([image], texts)
    t_score = time.perf_counter() - t0
    if np.asarray(logits).shape != (1, len(texts)):
        raise BackendError(f"score returned shape {np.asarray(logits).shape}")

    t0 = time.perf_counter()
    bundle = backend.activations(image, texts, [])
    t_act = time.perf_counter() - t0

    print(f"backend: {descriptor}")
    print(f"capabilities: {{{', '.join(sorted(backend.capabilities))}}}")
    print(f"score: ok ({t_score * 1000:.1f} ms), logits {logits.shape}")
    k, h, w = bundle.features.shape
    print(f"activations: ok ({t_act * 1000:.1f} ms), features "
          f"{k}x{h}x{w}, attn layers {bundle.attn.shape[0]}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
