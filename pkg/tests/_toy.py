"""Desk-preset toy models, trained once and cached under ``.cache/``.

The cache key is a hash of the full config text, so any change to the
preset retrains. Training wall time is stored next to the checkpoint.
"""
import hashlib
import json
import time
from pathlib import Path

from dfmarker.config import dump_text
from dfmarker.training import desk_config, load_checkpoint, train

CACHE = Path(__file__).resolve().parents[1] / ".cache"


def toy_config(tps: bool = True):
    cfg = desk_config()
    if not tps:
        cfg.augment.tps = False
    return cfg


def toy_model(tps: bool = True):
    """Returns ``(state, cfg, train_seconds)``."""
    cfg = toy_config(tps)
    text = dump_text(cfg)
    out = CACHE / f"desk-{'tps' if tps else 'notps'}-{hashlib.sha256(text.encode()).hexdigest()[:12]}"
    meta = out / "meta.json"
    if not meta.exists():
        t0 = time.perf_counter()
        train(cfg, out)
        seconds = time.perf_counter() - t0
        meta.write_text(json.dumps({"train_seconds": seconds, "config": text}))
    state, saved = load_checkpoint(out / "final.pt")
    assert saved == cfg and state.step == cfg.schedule.total_steps
    return state, cfg, json.loads(meta.read_text())["train_seconds"]


if __name__ == "__main__":
    import logging
    import sys
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for flag in sys.argv[1:] or ["tps", "notps"]:
        _, _, s = toy_model(flag == "tps")
        print(flag, f"{s / 60:.1f} min")
