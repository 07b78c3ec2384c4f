"""``dfmarker`` command line: dict, export-markers, render, train, detect, eval.

Exit codes: 0 ok, 2 usage/config, 3 IO, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .codec import CapacityError, Dictionary, messages_to_array, sample_messages
from .config import ConfigError, dump_text, load_run_config
from .evaluation import IdSpaceError, evaluate, parse_sweep
from .records import (detections_to_records, export_marker_png, load_image, read_annotations,
                      read_detections, sample_to_records, save_png, write_annotations, write_detections)

log = logging.getLogger("dfmarker")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--config", default=argparse.SUPPRESS, help="flat key = value config file")
    p.add_argument("--preset", choices=("desk", "paper"), default=argparse.SUPPRESS)
    p.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    return p


def _run_config(args):
    overrides = {}
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}", EXIT_USAGE)
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    try:
        return load_run_config(getattr(args, "preset", "desk"), getattr(args, "config", None), overrides,
                               getattr(args, "seed", None))
    except (ConfigError, KeyError, ValueError) as err:
        raise CliError(f"config: {err}", EXIT_USAGE) from err
    except OSError as err:
        raise CliError(f"cannot read config: {err}", EXIT_IO) from err


def _ensure_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as err:
        raise CliError(f"cannot write to {path}: {err}", EXIT_IO) from err
    return path


def _load_dictionary(path) -> Dictionary:
    try:
        return Dictionary.load(path)
    except OSError as err:
        raise CliError(f"cannot read dictionary {path}: {err}", EXIT_IO) from err
    except ValueError as err:
        raise CliError(f"bad dictionary {path}: {err}", EXIT_USAGE) from err


def _load_checkpoint(path):
    from .training import load_checkpoint
    try:
        return load_checkpoint(path)
    except OSError as err:
        raise CliError(f"cannot read checkpoint {path}: {err}", EXIT_IO) from err
    except (KeyError, RuntimeError, ValueError) as err:
        raise CliError(f"bad checkpoint {path}: {err}", EXIT_USAGE) from err


# ---------------------------------------------------------------- subcommands

def cmd_dict(args) -> int:
    seed = getattr(args, "seed", 0)
    try:
        if args.all:
            d = Dictionary.exhaustive(args.n_bits)
        else:
            if args.count is None:
                raise CliError("give --count or --all", EXIT_USAGE)
            d = Dictionary.sampled(args.n_bits, args.count, seed, min_distance=args.min_distance)
    except CapacityError as err:
        raise CliError(str(err), EXIT_USAGE) from err
    try:
        d.save(args.out)
    except OSError as err:
        raise CliError(f"cannot write {args.out}: {err}", EXIT_IO) from err
    print(f"wrote {len(d)} entries to {args.out}")
    return EXIT_OK


def cmd_export_markers(args) -> int:
    state, cfg = _load_checkpoint(args.checkpoint)
    d = _load_dictionary(args.dictionary)
    if d.n_bits != cfg.n_bits:
        raise CliError(f"dictionary has {d.n_bits} bits, checkpoint expects {cfg.n_bits}", EXIT_USAGE)
    out = _ensure_dir(args.out_dir)
    state.generator.eval()
    with torch.no_grad():
        markers = state.generator(torch.tensor(messages_to_array(d.entries)))
    for i, m in enumerate(markers):
        export_marker_png(out / f"marker_{i}.png", m, args.upscale)
    print(f"exported {len(d)} markers to {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .augment.pipeline import AugmentConfig
    from .training import build_state, synthesize_batch
    cfg = _run_config(args)
    if args.augment == "off":
        cfg.augment = AugmentConfig.disabled(rng_seed=cfg.augment.rng_seed)
    out = _ensure_dir(args.out)
    img_dir = _ensure_dir(out / "images")
    if args.checkpoint:
        state, ck_cfg = _load_checkpoint(args.checkpoint)
        if ck_cfg.n_bits != cfg.n_bits:
            raise CliError("checkpoint n_bits differs from config", EXIT_USAGE)
        gen = state.generator
    else:
        gen = build_state(cfg).generator
    gen.eval()
    dictionary = _load_dictionary(args.dictionary) if args.dictionary else None
    if dictionary is not None and dictionary.n_bits != cfg.n_bits:
        raise CliError(f"dictionary has {dictionary.n_bits} bits, config expects {cfg.n_bits}", EXIT_USAGE)
    records, written = [], 0
    with torch.no_grad():
        for i in range(args.samples):
            kw = {}
            if dictionary is not None:
                kw = dict(messages=list(dictionary.entries), marker_ids=list(range(len(dictionary))))
            sample = synthesize_batch(gen, cfg, i, batch_size=1, stream=2, **kw)[0]
            if sample.empty:
                log.warning("sample %d has no visible markers, skipped", i)
                continue
            try:
                save_png(img_dir / f"{i:06d}.png", sample.image)
            except OSError as err:
                raise CliError(f"cannot write image: {err}", EXIT_IO) from err
            records += sample_to_records(sample, i)
            written += 1
    try:
        write_annotations(out / "annotations.txt", records)
        (out / "manifest.txt").write_text(f"samples = {written}\nrequested = {args.samples}\n")
        (out / "config.txt").write_text(dump_text(cfg))
    except OSError as err:
        raise CliError(f"cannot write dataset files: {err}", EXIT_IO) from err
    print(f"rendered {written} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import NonFiniteLoss, train
    if args.resume:
        state, cfg = _load_checkpoint(args.resume)
    else:
        state, cfg = None, _run_config(args)
    out = _ensure_dir(args.out)
    try:
        (out / "config.txt").write_text(dump_text(cfg))
    except OSError as err:
        raise CliError(f"cannot write config echo: {err}", EXIT_IO) from err
    s = cfg.schedule
    print(f"preset={cfg.preset} total_steps={s.total_steps} decay_steps={list(s.decay_steps)} "
          f"lr={s.lr} batch_size={s.batch_size}")
    try:
        state = train(cfg, out, state=state, steps=args.steps)
    except NonFiniteLoss as err:
        raise CliError(f"training aborted: {err}", EXIT_NUMERIC) from err
    print(f"finished at step {state.step}; checkpoint {out / 'final.pt'}")
    return EXIT_OK


def _draw_overlay(path, image, dets):
    from PIL import Image, ImageDraw
    from .records import to_uint8
    im = Image.fromarray(to_uint8(image))
    draw = ImageDraw.Draw(im)
    for d in dets:
        pts = [tuple(map(float, p)) for p in d.corners]
        draw.line(pts + [pts[0]], fill=(255, 0, 0), width=1)
        draw.ellipse([pts[0][0] - 2, pts[0][1] - 2, pts[0][0] + 2, pts[0][1] + 2], outline=(0, 255, 0))
        draw.text(pts[0], "REJECT" if d.matched_id is None else str(d.matched_id), fill=(255, 255, 0))
    im.save(path, format="PNG")


def cmd_detect(args) -> int:
    state, cfg = _load_checkpoint(args.checkpoint)
    d = _load_dictionary(args.dictionary) if args.dictionary else None
    if d is not None and d.n_bits != cfg.n_bits:
        raise CliError(f"dictionary has {d.n_bits} bits, checkpoint expects {cfg.n_bits}", EXIT_USAGE)
    overlay = _ensure_dir(args.overlay) if args.overlay else None
    records, ok = [], 0
    for image_id, path in enumerate(args.images):
        try:
            image = load_image(path)
        except (OSError, ValueError) as err:
            log.warning("skipping %s: %s", path, err)
            continue
        found = state.detector.detect(image[None], d, score_thresh=args.score_thresh,
                                      identify_threshold=args.threshold)[0]
        recs = detections_to_records(found, image_id)
        records += recs
        ok += 1
        if overlay is not None:
            _draw_overlay(overlay / f"{Path(path).stem}_overlay.png", image, recs)
    if args.images and ok == 0:
        raise CliError("no readable images", EXIT_IO)
    try:
        write_detections(args.out, records)
    except OSError as err:
        raise CliError(f"cannot write {args.out}: {err}", EXIT_IO) from err
    print(f"{len(records)} detections from {ok} images -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        gts = read_annotations(args.gt)
        dets = read_detections(args.detections)
    except OSError as err:
        raise CliError(f"cannot read records: {err}", EXIT_IO) from err
    except ValueError as err:
        raise CliError(f"bad record: {err}", EXIT_USAGE) from err
    d = _load_dictionary(args.dictionary) if args.dictionary else None
    try:
        thresholds = parse_sweep(args.sweep) if args.sweep else None
    except ValueError as err:
        raise CliError(str(err), EXIT_USAGE) from err
    if thresholds and d is None:
        raise CliError("--sweep needs --dictionary", EXIT_USAGE)
    try:
        report = evaluate(gts, dets, d, thresholds, require_id=not args.class_agnostic)
    except IdSpaceError as err:
        raise CliError(f"id-space mismatch: {err}", EXIT_USAGE) from err
    sys.stdout.write(report.to_text())
    if thresholds:
        text = report.sweep_csv()
        if args.curve_out:
            Path(args.curve_out).write_text(text)
        else:
            sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    p = argparse.ArgumentParser(prog="dfmarker", parents=[common],
                                description="Learned deformable marker toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("dict", parents=[common], help="create a dictionary file")
    s.add_argument("--n-bits", type=int, required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--count", type=int)
    g.add_argument("--all", action="store_true")
    s.add_argument("--min-distance", type=int, default=0)
    s.add_argument("--out", default="dictionary.txt")
    s.set_defaults(func=cmd_dict)

    s = sub.add_parser("export-markers", parents=[common], help="write marker PNGs")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dictionary", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--upscale", type=int, default=1)
    s.set_defaults(func=cmd_export_markers)

    s = sub.add_parser("render", parents=[common], help="render a synthetic dataset")
    s.add_argument("--samples", type=int, default=16)
    s.add_argument("--out", default="dataset")
    s.add_argument("--augment", choices=("on", "off"), default="on")
    s.add_argument("--checkpoint")
    s.add_argument("--dictionary")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("train", parents=[common], help="train generator and detector")
    s.add_argument("--out", default="run")
    s.add_argument("--steps", type=int, help="stop after this many steps (resumable)")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("detect", parents=[common], help="detect markers in images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dictionary")
    s.add_argument("--out", default="detections.txt")
    s.add_argument("--overlay", help="directory for overlay PNGs")
    s.add_argument("--threshold", type=float, default=None, help="identification confidence")
    s.add_argument("--score-thresh", type=float, default=None)
    s.add_argument("images", nargs="*")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("eval", parents=[common], help="score detections against annotations")
    s.add_argument("--gt", required=True)
    s.add_argument("--detections", required=True)
    s.add_argument("--dictionary")
    s.add_argument("--sweep", help="start:step:stop confidence thresholds")
    s.add_argument("--curve-out")
    s.add_argument("--class-agnostic", action="store_true")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    torch.manual_seed(getattr(args, "seed", 0))
    try:
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())
