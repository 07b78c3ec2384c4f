"""Flat ``key = value`` configuration over :class:`TrainConfig`.

Nested sections use dotted keys (``schedule.lr``, ``augment.tps_shift_max``,
``detector.roi_batch_per_image``). Every key must exist in the schema
derived from the defaults, so typos fail loudly.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .augment.pipeline import AugmentConfig
from .detector.model import DetectorConfig
from .render import SceneConfig
from .training import PRESETS, LossWeights, TrainConfig, TrainSchedule

SECTIONS = {"schedule": TrainSchedule, "scene": SceneConfig, "weights": LossWeights}
OPTIONAL = {"rgb_init_std"}     # float or none


class ConfigError(ValueError):
    pass


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        if v and isinstance(v[0], (tuple, list)):
            return ";".join(_fmt(x) for x in v)
        return ",".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_like(raw, default, key):
    if not isinstance(raw, str):
        return raw
    s = raw.strip()
    try:
        if default is None or key in OPTIONAL:
            return None if s.lower() in ("", "none") else float(s)
        if isinstance(default, bool):
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if isinstance(default, int):
            return int(s)
        if isinstance(default, float):
            return float(s)
        if isinstance(default, tuple):
            if default and isinstance(default[0], tuple):
                return tuple(tuple(int(x) for x in part.split(",")) for part in s.split(";") if part)
            typ = type(default[0]) if default else float
            return tuple(typ(x) for x in s.split(",") if x.strip())
    except ValueError as err:
        raise ConfigError(f"bad value for {key}: {raw!r}") from err
    return s


def flatten(cfg: TrainConfig) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in SECTIONS:
            for g in fields(v):
                if f.name == "scene" and g.name in ("height", "width"):
                    continue    # set through image_size
                out[f"{f.name}.{g.name}"] = getattr(v, g.name)
        elif f.name == "augment":
            for k, x in v.to_flat().items():
                out[f"augment.{k}"] = x
        elif f.name == "detector":
            merged = {**{g.name: getattr(cfg.detector_config(), g.name) for g in fields(DetectorConfig)}}
            for k, x in merged.items():
                if k not in ("n_bits", "samples"):
                    out[f"detector.{k}"] = x
        else:
            out[f.name] = v
    return out


def unflatten(flat: dict, base: TrainConfig) -> TrainConfig:
    """Apply ``flat`` (strings or typed values) on top of ``base``; unknown keys raise."""
    schema = flatten(base)
    unknown = sorted(set(flat) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    merged = dict(schema)
    for k, raw in flat.items():
        merged[k] = _parse_like(raw, schema[k], k)
    kw = {}
    for f in fields(TrainConfig):
        if f.name in SECTIONS:
            kw[f.name] = SECTIONS[f.name](**{g.name: merged[f"{f.name}.{g.name}"]
                                            for g in fields(SECTIONS[f.name])
                                            if f"{f.name}.{g.name}" in merged})
        elif f.name == "augment":
            kw[f.name] = AugmentConfig.from_flat({k[8:]: v for k, v in merged.items() if k.startswith("augment.")})
        elif f.name == "detector":
            kw[f.name] = {k[9:]: v for k, v in merged.items() if k.startswith("detector.")}
        else:
            kw[f.name] = merged[f.name]
    try:
        return TrainConfig(**kw)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def parse_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def dump_text(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(flatten(cfg).items()))


def load_run_config(preset: str = "desk", path=None, overrides: dict | None = None,
                    seed: int | None = None) -> TrainConfig:
    """defaults (preset) <- config file <- command-line overrides <- seed."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = PRESETS[preset]()
    flat = {}
    if path is not None:
        flat.update(parse_text(Path(path).read_text(encoding="utf-8")))
    flat.update(overrides or {})
    if seed is not None:
        flat["seed"] = seed
    return unflatten(flat, cfg) if flat else cfg
