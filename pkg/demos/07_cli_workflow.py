"""
The command-line workflow, end to end
=====================================

Write a scene and a manifest, run the segmenter, then score the
predictions against ground truth with the eval subcommand. Everything
here also works with `recurseg ...` on a shell; this script drives the
same entry point in-process.
"""

import json
from pathlib import Path

import numpy as np

from recurseg import ToySceneSpec, save_image_png, save_label_png
from recurseg.backend import scene_to_json
from recurseg.cli import main
from recurseg.core import BACKGROUND

work = Path(__file__).parent / "output" / "cli"
work.mkdir(parents=True, exist_ok=True)

# one scene, saved as image + scene JSON (the toy backend's "weights")
scene = ToySceneSpec.random(seed=7, n_planted=3)
save_image_png(work / "scene.png", scene.render())
(work / "scene.json").write_text(scene_to_json(scene))

# ground-truth label PNG (background serializes as 255)
gt = np.full((64, 64), BACKGROUND, dtype=np.int32)
for i, c in enumerate(scene.planted):
    gt[c.mask.mask] = i
save_label_png(work / "scene_gt.png", gt)

# manifest referencing both
manifest = work / "run.jsonl"
manifest.write_text(json.dumps({
    "image": "scene.png", "gt": "scene_gt.png",
    "queries": [c.text for c in scene.planted] + ["unicorn"],
}) + "\n")

backend = f"toy:seed=7,scene={work / 'scene.json'}"
out = work / "predictions"

code = main(["run", "--manifest", str(manifest), "--backend", backend,
             "--trace", "--out", str(out)])
print(f"\n`recurseg run` exit code: {code}")
print("outputs:", sorted(p.name for p in out.iterdir()))

code = main(["eval", "--manifest", str(manifest), "--pred", str(out),
             "--jf", "--out", str(work / "report.json")])
print(f"\n`recurseg eval` exit code: {code}")
print("report:", (work / "report.json").read_text().strip())
