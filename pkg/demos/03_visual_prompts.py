"""
The visual prompt menu
======================

Six ways to steer a classifier's attention to a masked region: draw a red
ellipse, rectangle or contour around it, or restyle everything outside it
(blur, grayscale, black). Types compose; circle + blur is the reference
combination for the mask classifier.
"""

from pathlib import Path

from recurseg import (PromptSpec, ToySceneSpec, apply_visual_prompts,
                      save_image_png)
from recurseg.prompter import PROMPT_TYPES

out_dir = Path(__file__).parent / "output"
out_dir.mkdir(exist_ok=True)

scene = ToySceneSpec.random(seed=3, n_planted=1)
image = scene.render()
mask = scene.planted[0].mask

for ptype in PROMPT_TYPES:
    rendered = apply_visual_prompts(image, mask, PromptSpec(types=(ptype,)))
    save_image_png(out_dir / f"prompt_{ptype}.png", rendered)
    print(f"prompt_{ptype}.png")

combo = apply_visual_prompts(image, mask,
                             PromptSpec(types=("circle", "blur")))
save_image_png(out_dir / "prompt_circle_blur.png", combo)
print("prompt_circle_blur.png  (the default combination)")
print(f"\nwrote renderings to {out_dir}")
