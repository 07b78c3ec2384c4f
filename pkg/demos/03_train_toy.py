"""
Training the desk-scale toy model
=================================

Generator and detector train jointly on freshly rendered scenes. The
full desk schedule is 2000 steps (roughly 45 minutes on one CPU core);
pass a smaller step count to watch the first part of the curve.

    python demos/03_train_toy.py 200 runs/toy
"""
import logging
import sys

from dfmarker.evaluation import evaluate
from dfmarker.training import desk_config, desk_dictionary, held_out_records, train

logging.basicConfig(level=logging.INFO, format="%(message)s")
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
out = sys.argv[2] if len(sys.argv) > 2 else "runs/toy"

cfg = desk_config()
s = cfg.schedule
print(f"optimizer {s.optimizer}, lr {s.lr}, decays at {s.decay_steps}, batch {s.batch_size}")
state = train(cfg, out, steps=steps, log_every=25)

# unseen scenes of the 16 dictionary markers
d = desk_dictionary(cfg)
gts, dets = held_out_records(state, cfg, d, n_images=16)
print(evaluate(gts, dets, d).to_text())
