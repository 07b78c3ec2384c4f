"""Random imaging-artifact pipeline with label recalculation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np
import torch

from ..render import SceneSample, gamma_encode
from . import photometric as pm
from .jpeg import jpeg_approx
from .warps import (AffineStage, HomographyStage, RadialParams, RadialStage, TpsStage,
                    WarpChain, grid_control_points, homography_from_points, tps_fit,
                    warp_image)

GEOMETRIC = ("homography", "affine", "radial", "tps")
PHOTOMETRIC = ("defocus", "motion", "noise", "brightness", "gamma", "hue", "jpeg")


@dataclass
class AugmentConfig:
    """Enable flags plus ``(min, max)`` strength ranges for every artifact.

    Geometric magnitudes are fractions of the image size; ``tps_shift`` is a
    fraction of the smaller image side.
    """
    homography: bool = True
    affine: bool = True
    radial: bool = True
    tps: bool = True
    defocus: bool = True
    motion: bool = True
    noise: bool = True
    brightness: bool = True
    gamma: bool = True
    hue: bool = True
    jpeg: bool = True

    homography_jitter: tuple = (0.0, 0.1)
    affine_rotation: tuple = (-15.0, 15.0)
    affine_scale: tuple = (0.85, 1.15)
    affine_translate: tuple = (-0.05, 0.05)
    radial_k1: tuple = (-0.15, 0.0)
    radial_k2: tuple = (-0.02, 0.0)
    radial_k3: tuple = (-0.005, 0.0)
    radial_focal: tuple = (0.8, 1.4)
    radial_center: tuple = (-0.05, 0.05)
    tps_grid: tuple = (4, 4)
    tps_shift: tuple = (0.0, 0.12)
    defocus_radius: tuple = (0.0, 2.0)
    motion_length: tuple = (0.0, 6.0)
    motion_angle: tuple = (0.0, 180.0)
    noise_sigma: tuple = (0.0, 0.02)
    brightness_scale: tuple = (0.6 ** 10, 1.2)
    gamma_exponent: tuple = (0.8, 1.25)
    hue_shift: tuple = (-27.0, 27.0)
    jpeg_quality: tuple = (30.0, 100.0)
    rng_seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (list, tuple)):
                if len(v) != 2 or v[0] > v[1]:
                    raise ValueError(f"{f.name} must be an ordered (min, max) pair, got {v}")
                setattr(self, f.name, tuple(v))

    @classmethod
    def disabled(cls, **kw) -> "AugmentConfig":
        flags = {name: False for name in GEOMETRIC + PHOTOMETRIC}
        flags.update(kw)
        return cls(**flags)

    @classmethod
    def mild(cls, **kw) -> "AugmentConfig":
        """Moderate ranges used by the desk-scale preset."""
        base = dict(
            homography_jitter=(0.0, 0.05), affine_rotation=(-10.0, 10.0), affine_scale=(0.9, 1.1),
            affine_translate=(-0.03, 0.03), radial_k1=(-0.08, 0.0), radial_k2=(-0.01, 0.0),
            radial_k3=(0.0, 0.0), tps_shift=(0.0, 0.10), defocus_radius=(0.0, 1.0),
            motion_length=(0.0, 3.0), noise_sigma=(0.0, 0.01), brightness_scale=(0.5, 1.2),
            gamma_exponent=(0.9, 1.1), hue_shift=(-10.0, 10.0), jpeg_quality=(60.0, 100.0))
        base.update(kw)
        return cls(**base)

    # flat key-value form: flags as ``name = true``, ranges as name_min / name_max
    def to_flat(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                out[f"{f.name}_min"], out[f"{f.name}_max"] = v
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "AugmentConfig":
        kw = {}
        known = {f.name: f for f in fields(cls)}
        consumed = set()
        for name, f in known.items():
            default = getattr(cls(), name)
            if isinstance(default, tuple):
                lo, hi = flat.get(f"{name}_min"), flat.get(f"{name}_max")
                if lo is not None or hi is not None:
                    typ = type(default[0])
                    kw[name] = (typ(lo if lo is not None else default[0]),
                                typ(hi if hi is not None else default[1]))
                consumed |= {f"{name}_min", f"{name}_max"}
            elif name in flat:
                v = flat[name]
                if isinstance(default, bool):
                    v = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes", "on")
                else:
                    v = type(default)(v)
                kw[name] = v
                consumed.add(name)
        unknown = set(flat) - consumed
        if unknown:
            raise KeyError(f"unknown augmentation keys: {sorted(unknown)}")
        return cls(**kw)


def sample_seed(global_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([global_seed, index]))


def _u(rng, rng_range):
    lo, hi = rng_range
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


@dataclass
class AugmentParams:
    """Concrete parameters for one sample."""
    chain: WarpChain
    defocus_radius: float = 0.0
    motion_length: float = 0.0
    motion_angle: float = 0.0
    noise_sigma: float = 0.0
    brightness: float = 1.0
    gamma: float = 1.0
    hue: float = 0.0
    jpeg_quality: Optional[float] = None
    noise_seed: int = 0
    values: dict = field(default_factory=dict)


def random_homography(rng, h, w, jitter_range, dtype=torch.float64) -> HomographyStage:
    amp = _u(rng, jitter_range)
    src = torch.tensor([[0, 0], [w, 0], [w, h], [0, h]], dtype=dtype)
    delta = torch.tensor(rng.uniform(-1, 1, size=(4, 2)), dtype=dtype) * amp * torch.tensor([w, h], dtype=dtype)
    return HomographyStage(homography_from_points(src, src + delta)), amp


def random_affine(rng, h, w, cfg: AugmentConfig, dtype=torch.float64):
    ang = math.radians(_u(rng, cfg.affine_rotation))
    sc = _u(rng, cfg.affine_scale)
    tx = _u(rng, cfg.affine_translate) * w
    ty = _u(rng, cfg.affine_translate) * h
    cx, cy = w / 2, h / 2
    R = torch.tensor([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]], dtype=dtype) * sc
    c = torch.tensor([cx, cy], dtype=dtype)
    t = c - R @ c + torch.tensor([tx, ty], dtype=dtype)
    return AffineStage(torch.cat([R, t[:, None]], 1)), dict(rotation=math.degrees(ang), scale=sc,
                                                              translate_x=tx / w, translate_y=ty / h)


def random_radial(rng, h, w, cfg: AugmentConfig):
    p = RadialParams(
        k1=_u(rng, cfg.radial_k1), k2=_u(rng, cfg.radial_k2), k3=_u(rng, cfg.radial_k3),
        center=(w / 2 + _u(rng, cfg.radial_center) * w, h / 2 + _u(rng, cfg.radial_center) * h),
        focal=_u(rng, cfg.radial_focal) * max(h, w))
    return RadialStage(p), p


def random_tps(rng, h, w, grid: int, shift_range, dtype=torch.float64):
    """Uniform target lattice; source points shifted in random directions."""
    amp_max = _u(rng, shift_range) * min(h, w)
    dst = grid_control_points(h, w, grid, dtype)
    ang = rng.uniform(0, 2 * math.pi, size=len(dst))
    mag = rng.uniform(0, 1, size=len(dst)) * amp_max
    shift = torch.tensor(np.stack([np.cos(ang) * mag, np.sin(ang) * mag], 1), dtype=dtype)
    return TpsStage(tps_fit(dst + shift, dst)), amp_max / min(h, w)


def sample_params(cfg: AugmentConfig, size: tuple, rng: np.random.Generator) -> AugmentParams:
    """Draw one sample's parameters. Disabled artifacts consume no randomness."""
    h, w = size
    stages = []
    values = {}
    if cfg.homography:
        st, amp = random_homography(rng, h, w, cfg.homography_jitter)
        stages.append(st)
        values["homography_jitter"] = amp
    if cfg.affine:
        st, v = random_affine(rng, h, w, cfg)
        stages.append(st)
        values.update({f"affine_{k}": v[k] for k in ("rotation", "scale")})
        values["affine_translate"] = v["translate_x"]
    if cfg.radial:
        st, p = random_radial(rng, h, w, cfg)
        stages.append(st)
        values.update(radial_k1=p.k1, radial_k2=p.k2, radial_k3=p.k3, radial_focal=p.focal / max(h, w))
    if cfg.tps:
        g = int(rng.integers(cfg.tps_grid[0], cfg.tps_grid[1] + 1))
        st, amp = random_tps(rng, h, w, g, cfg.tps_shift)
        stages.append(st)
        values["tps_shift"] = amp
        values["tps_grid"] = g
    p = AugmentParams(WarpChain(stages), values=values)
    if cfg.defocus:
        p.defocus_radius = values["defocus_radius"] = _u(rng, cfg.defocus_radius)
    if cfg.motion:
        p.motion_length = values["motion_length"] = _u(rng, cfg.motion_length)
        p.motion_angle = values["motion_angle"] = _u(rng, cfg.motion_angle)
    if cfg.noise:
        p.noise_sigma = values["noise_sigma"] = _u(rng, cfg.noise_sigma)
        p.noise_seed = int(rng.integers(0, 2 ** 31 - 1))
    if cfg.brightness:
        p.brightness = values["brightness_scale"] = _u(rng, cfg.brightness_scale)
    if cfg.gamma:
        p.gamma = values["gamma_exponent"] = _u(rng, cfg.gamma_exponent)
    if cfg.hue:
        p.hue = values["hue_shift"] = _u(rng, cfg.hue_shift)
    if cfg.jpeg:
        p.jpeg_quality = values["jpeg_quality"] = _u(rng, cfg.jpeg_quality)
    return p


# ---------------------------------------------------------------- labels

def warp_labels(annotations, chain: WarpChain, size: tuple | None = None):
    """Map corners and sample grids through ``chain``.

    Returns ``(kept, dropped_ids)``; with ``size`` given, markers whose
    warped hull misses the image entirely are dropped.
    """
    kept, dropped = [], []
    for a in annotations:
        if len(chain):
            corners = chain.forward(a.corners.double())
            grid = chain.forward(a.sample_grid.double())
        else:
            corners, grid = a.corners, a.sample_grid
        b = a.replace(corners, grid)
        if size is not None:
            h, w = size
            x0, y0, x1, y1 = [float(v) for v in b.box]
            if x1 <= 0 or y1 <= 0 or x0 >= w or y0 >= h or not math.isfinite(x0 + y0 + x1 + y1):
                dropped.append(a.marker_id)
                continue
        kept.append(b)
    return kept, dropped


# ---------------------------------------------------------------- full pipeline

def apply_photometric(image: torch.Tensor, p: AugmentParams) -> torch.Tensor:
    """Blur -> noise -> colour -> JPEG on a (B, 3, H, W) linear image."""
    if p.defocus_radius > 0:
        image = pm.blur(image, "defocus", radius=p.defocus_radius)
    if p.motion_length > 0:
        image = pm.blur(image, "motion", length=p.motion_length, angle=p.motion_angle)
    if p.noise_sigma > 0:
        gen = torch.Generator().manual_seed(p.noise_seed)
        image = pm.add_noise(image, p.noise_sigma, generator=gen)
    if p.brightness != 1.0:
        image = pm.adjust_brightness(image, p.brightness)
    if p.gamma != 1.0:
        image = pm.adjust_gamma(image, p.gamma)
    if p.hue != 0.0:
        image = pm.shift_hue(image, p.hue)
    if p.jpeg_quality is not None:
        image = jpeg_approx(image, p.jpeg_quality)
    return image


def apply_params(sample: SceneSample, p: AugmentParams) -> SceneSample:
    h, w = sample.size
    image = sample.image[None]
    if len(p.chain):
        image = warp_image(image, p.chain)
    annotations, dropped = warp_labels(sample.annotations, p.chain, (h, w))
    image = gamma_encode(apply_photometric(image, p))[0]
    return SceneSample(image, annotations, sample.image_id, empty=not annotations,
                       dropped=list(sample.dropped) + dropped)


def apply_pipeline(sample: SceneSample, cfg: AugmentConfig, index: int = 0) -> SceneSample:
    """Augment one rendered sample; randomness comes from ``(cfg.rng_seed, index)``."""
    rng = sample_seed(cfg.rng_seed, index)
    return apply_params(sample, sample_params(cfg, sample.size, rng))
