"""
Detection, identification and the confidence sweep
===================================================

Loads a trained checkpoint, renders held-out scenes, detects markers and
scores them. The sweep re-identifies every detection at thresholds from
0.5 to 1.0: stricter thresholds reject more imperfect decodes.

    python demos/04_detect_and_evaluate.py runs/toy/final.pt
"""
import sys

from dfmarker.augment.pipeline import AugmentConfig
from dfmarker.evaluation import evaluate, parse_sweep
from dfmarker.training import desk_dictionary, held_out_records, load_checkpoint

state, cfg = load_checkpoint(sys.argv[1] if len(sys.argv) > 1 else "runs/toy/final.pt")
d = desk_dictionary(cfg)

gts, dets = held_out_records(state, cfg, d, n_images=32)
report = evaluate(gts, dets, d, parse_sweep("0.5:0.05:1.0"))
print(report.to_text())
print(report.sweep_csv())

# the same model on scenes with strong thin-plate-spline deformation
warped = AugmentConfig.mild(tps_shift=(0.08, 0.12))
gts, dets = held_out_records(state, cfg, d, n_images=32, augment=warped)
print("under TPS warps:", evaluate(gts, dets, d).to_text().splitlines()[0])
