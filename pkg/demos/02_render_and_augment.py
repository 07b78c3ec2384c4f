"""
Rendering a training scene and augmenting it
============================================

Markers are placed on a random board, shaded, then pushed through the
differentiable imaging chain (warps, blur, noise, colour, JPEG). Labels
are moved by the same point map, so corners stay exact.
"""
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from dfmarker.augment.pipeline import AugmentConfig, apply_pipeline
from dfmarker.records import save_png, to_uint8
from dfmarker.render import SceneConfig, gamma_encode, layout_presets, place_markers, random_board_scene

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_scene")
out.mkdir(parents=True, exist_ok=True)

rng = np.random.default_rng(3)
scene = random_board_scene(rng, SceneConfig(height=256, width=256))
layout = layout_presets()[2]                      # 3x3 grid of slots
markers = torch.rand(len(layout.slots), 16, 16, 3, generator=torch.Generator().manual_seed(0))
sample = place_markers(scene, layout, markers, list(range(len(layout.slots))), samples=9)
save_png(out / "clean.png", gamma_encode(sample.image))

# strong TPS deformation on top of the mild preset
aug = apply_pipeline(sample, AugmentConfig.mild(tps_shift=(0.08, 0.08), rng_seed=1), index=0)
print(f"{len(aug.annotations)} markers visible, {len(aug.dropped)} dropped")

# draw corners (TL in green) and the 9x9 sampling grid of each marker
im = Image.fromarray(to_uint8(aug.image))
draw = ImageDraw.Draw(im)
for a in aug.annotations:
    pts = [tuple(map(float, p)) for p in a.corners]
    draw.line(pts + [pts[0]], fill=(255, 0, 0))
    draw.ellipse([pts[0][0] - 2, pts[0][1] - 2, pts[0][0] + 2, pts[0][1] + 2], outline=(0, 255, 0))
    for x, y in a.sample_grid.reshape(-1, 2).tolist():
        draw.point((x, y), fill=(255, 255, 0))
im.save(out / "augmented_labels.png")
print("wrote", out / "clean.png", out / "augmented_labels.png")
