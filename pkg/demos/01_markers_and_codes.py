"""
Messages, dictionaries and generated markers
============================================

A marker encodes an n-bit message. The generator turns a batch of bit
vectors into RGB textures; a dictionary fixes which messages are in use,
and identification snaps noisy decoded bits to the nearest entry.
"""
import sys
from pathlib import Path

import torch

from dfmarker.codec import Dictionary, identify
from dfmarker.generator import GeneratorConfig, MarkerGenerator
from dfmarker.records import export_marker_png

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_markers")
out.mkdir(parents=True, exist_ok=True)

# a 16-entry dictionary of 8-bit codes, every pair at least 3 bits apart
d = Dictionary.sampled(8, 16, seed=0, min_distance=3)
print("first entries:", [m.to_string() for m in d.entries[:4]])

# an untrained 16x16 generator: three upsampling stages from a 4x4 seed
torch.manual_seed(0)
gen = MarkerGenerator(GeneratorConfig(n_bits=8, stage_channels=[16, 8, 6], marker_resolution=16,
                                      rgb_init_std=0.5))
bits = torch.tensor([m.bits for m in d.entries], dtype=torch.float32)
with torch.no_grad():
    markers = gen(bits)
print("markers:", tuple(markers.shape), "value range", float(markers.min()), float(markers.max()))

# nearest-neighbour upscaling keeps texels crisp for printing
for i, m in enumerate(markers[:4]):
    export_marker_png(out / f"marker_{i}.png", m, upscale=8)

# identification: 1 flipped bit out of 8 keeps 7/8 = 0.875 >= 0.8 agreement
noisy = list(d[3].bits)
noisy[0] = 1 - noisy[0]
r = identify(noisy, d, 0.8)
print("one flip ->", r.matched_id, round(r.confidence, 3))
# with minimum distance 3, two flips can land closer to a different entry
noisy[1] = 1 - noisy[1]
r = identify(noisy, d, 0.8)
print("two flips ->", "REJECT" if r.matched_id is None else r.matched_id, round(r.confidence, 3))
