"""Losses, adaptive clamping, LR schedule and the end-to-end training step."""
from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .augment.pipeline import AugmentConfig, apply_pipeline, sample_seed
from .codec import Dictionary, messages_to_array, sample_messages
from .detector.model import DetectorConfig, MarkerDetector, RoiOutputs, targets_from_annotations
from .generator import GeneratorConfig, MarkerGenerator
from .render import (SceneConfig, SceneSample, add_specular, board_mask, layout_presets,
                     place_markers, random_board_scene, random_specular)

log = logging.getLogger(__name__)

LOSS_NAMES = ("rpn_class", "rpn_loc", "sample", "corner", "objectness", "decode")


# ---------------------------------------------------------------- losses

def corner_loss(gt: torch.Tensor, pred: torch.Tensor, fg_mask: torch.Tensor | None = None) -> torch.Tensor:
    """L1 over the 8 corner coordinates of foreground regions / (8 * all regions)."""
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch {tuple(gt.shape)} vs {tuple(pred.shape)}")
    n_total = gt.shape[0]
    if fg_mask is None:
        fg_mask = torch.ones(n_total, dtype=torch.bool)
    if n_total == 0 or not fg_mask.any():
        return pred.sum() * 0.0
    return (gt[fg_mask] - pred[fg_mask]).abs().sum() / (8 * n_total)


def sampling_loss(gt_grid: torch.Tensor, pred_grid: torch.Tensor,
                  fg_mask: torch.Tensor | None = None) -> torch.Tensor:
    """L1 over sample locations / (2 * regions * samples per region)."""
    if gt_grid.shape != pred_grid.shape:
        raise ValueError(f"shape mismatch {tuple(gt_grid.shape)} vs {tuple(pred_grid.shape)}")
    n_total = gt_grid.shape[0]
    n_sample = gt_grid.shape[1] * gt_grid.shape[2]
    if fg_mask is None:
        fg_mask = torch.ones(n_total, dtype=torch.bool)
    if n_total == 0 or not fg_mask.any():
        return pred_grid.sum() * 0.0
    return (gt_grid[fg_mask] - pred_grid[fg_mask]).abs().sum() / (2 * n_total * n_sample)


def decoding_loss(encoded: torch.Tensor, decoded: torch.Tensor,
                  fg_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Squared L2 between message bits and soft decodes / (regions * bits)."""
    if encoded.shape != decoded.shape:
        raise ValueError(f"shape mismatch {tuple(encoded.shape)} vs {tuple(decoded.shape)}")
    n_total, n_bits = encoded.shape
    if fg_mask is None:
        fg_mask = torch.ones(n_total, dtype=torch.bool)
    if n_total == 0 or not fg_mask.any():
        return decoded.sum() * 0.0
    return ((encoded[fg_mask] - decoded[fg_mask]) ** 2).sum() / (n_total * n_bits)


def objectness_loss(logits: torch.Tensor, fg_mask: torch.Tensor) -> torch.Tensor:
    if logits.numel() == 0:
        return logits.sum() * 0.0
    return F.binary_cross_entropy_with_logits(logits, fg_mask.to(logits.dtype))


@dataclass
class LossWeights:
    rpn_class: float = 1.0
    rpn_loc: float = 1.0
    sample: float = 1.0
    corner: float = 0.1
    objectness: float = 0.5
    decode: float = 10.0


@dataclass
class LossReport:
    rpn_class: float = 0.0
    rpn_loc: float = 0.0
    corner: float = 0.0
    sample: float = 0.0
    decode: float = 0.0
    objectness: float = 0.0
    total: float = 0.0
    clamped_terms: list = field(default_factory=list)
    total_tensor: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)
    terms: dict = field(default_factory=dict, repr=False, compare=False)   # weighted tensors

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in LOSS_NAMES + ("total",)}


class NonFiniteLoss(FloatingPointError):
    pass


def total_loss(parts: dict, weights: LossWeights | None = None, clamped: list | None = None) -> LossReport:
    """Weighted sum of the six loss terms. Raises :class:`NonFiniteLoss` on NaN/inf parts."""
    weights = weights or LossWeights()
    total = 0.0
    values, terms = {}, {}
    for name in LOSS_NAMES:
        v = parts.get(name, 0.0)
        fv = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(fv):
            raise NonFiniteLoss(f"loss term {name} is {fv}")
        values[name] = fv
        terms[name] = getattr(weights, name) * v
        total = total + terms[name]
    ft = float(total.detach()) if torch.is_tensor(total) else float(total)
    return LossReport(**values, total=ft, clamped_terms=list(clamped or []),
                      total_tensor=total if torch.is_tensor(total) else None, terms=terms)


# ---------------------------------------------------------------- adaptive clamping

@dataclass
class RunningStats:
    """Exponential moving mean/variance per loss name."""
    decay: float = 0.99
    warmup: int = 100
    mean: dict = field(default_factory=dict)
    var: dict = field(default_factory=dict)
    count: dict = field(default_factory=dict)

    def std(self, name) -> float:
        return math.sqrt(max(self.var.get(name, 0.0), 0.0))

    def threshold(self, name) -> float:
        return self.mean[name] + 3 * self.std(name)

    def update(self, name, value: float):
        if name not in self.mean:
            self.mean[name], self.var[name], self.count[name] = value, 0.0, 1
            return
        delta = value - self.mean[name]
        self.mean[name] += (1 - self.decay) * delta
        self.var[name] = self.decay * (self.var[name] + (1 - self.decay) * delta * delta)
        self.count[name] += 1

    def state_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_state(cls, d: dict) -> "RunningStats":
        return cls(**d)


def adaptive_clamp(value: torch.Tensor, stats: RunningStats, name: str = "loss"):
    """Clamp ``value`` to mean + 3 std of its history once past warmup.

    The clamped value keeps the graph (it is ``value`` rescaled), so its
    gradient shrinks by the same factor. Stats always see the raw value.
    Returns ``(value, clamped?)``.
    """
    raw = float(value.detach()) if torch.is_tensor(value) else float(value)
    clamped = False
    out = value
    if stats.count.get(name, 0) >= stats.warmup:
        thr = stats.threshold(name)
        if raw > thr and raw > 0:
            out = value * (thr / raw)
            clamped = True
    stats.update(name, raw)
    return out, clamped


# ---------------------------------------------------------------- schedule

@dataclass
class TrainSchedule:
    total_steps: int = 35000
    lr: float = 0.02
    decay_steps: tuple = (20000, 30000)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip_norm: float = 1.0
    batch_size: int = 16
    messages_per_iter: int = 96
    warmup_steps: int = 1000
    warmup_factor: float = 0.001
    optimizer: str = "sgd"          # "sgd" (momentum) or "adam"

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.decay_steps = tuple(self.decay_steps)
        if any(b <= a for a, b in zip(self.decay_steps, self.decay_steps[1:])):
            raise ValueError("decay_steps must be strictly increasing")
        if self.decay_steps and self.decay_steps[-1] >= self.total_steps:
            raise ValueError("decay_steps must precede total_steps")

    def lr_at(self, step: int) -> float:
        factor = self.decay_factor ** sum(step >= s for s in self.decay_steps)
        if step < self.warmup_steps:
            alpha = step / self.warmup_steps
            factor *= self.warmup_factor * (1 - alpha) + alpha
        return self.lr * factor


# ---------------------------------------------------------------- configuration

@dataclass
class TrainConfig:
    preset: str = "paper"
    seed: int = 0
    n_bits: int = 36
    dictionary_size: int = 96
    dictionary_min_distance: int = 0
    marker_resolution: int = 32
    generator_channels: tuple = (16, 8, 6, 6)
    normalization: str = "adain_zero_pad"
    rgb_init_std: float | None = None
    generator_lr_mult: float = 1.0
    image_size: int = 256
    samples: int = 9
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    detector: dict = field(default_factory=dict)
    layouts: tuple = ()
    weights: LossWeights = field(default_factory=LossWeights)
    clamp_warmup: int = 100
    ema_decay: float = 0.99
    generator_loss_terms: tuple = ("decode",)
    checkpoint_every: int = 500
    max_nan_steps: int = 10

    def __post_init__(self):
        # image_size is authoritative for the rendered scenes
        if (self.scene.height, self.scene.width) != (self.image_size, self.image_size):
            self.scene = replace(self.scene, height=self.image_size, width=self.image_size)
        # store the full detector settings so equal configs compare equal
        full = asdict(self.detector_config())
        self.detector = {k: v for k, v in full.items() if k not in ("n_bits", "samples")}

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(n_bits=self.n_bits, stage_channels=list(self.generator_channels),
                               marker_resolution=self.marker_resolution, normalization=self.normalization,
                               rgb_init_std=self.rgb_init_std)

    def detector_config(self) -> DetectorConfig:
        kw = dict(n_bits=self.n_bits, samples=self.samples)
        kw.update(self.detector)
        return DetectorConfig.from_dict(kw)


def paper_config(**kw) -> TrainConfig:
    """Full-scale schedule (35k steps, decays at 20k/30k) with 36-bit markers."""
    return TrainConfig(preset="paper", **kw)


def desk_config(**kw) -> TrainConfig:
    """Toy preset: 8-bit messages, 16-entry dictionary, 16x16 markers, 256x256 scenes."""
    # Adam and a larger toRGB init: with SGD the generator barely moves within 2000 steps
    sched = TrainSchedule(total_steps=2000, lr=0.001, decay_steps=(1400, 1800), batch_size=2,
                          messages_per_iter=96, warmup_steps=50, grad_clip_norm=1.0, optimizer="adam")
    det = dict(stem_channels=64, fpn_channels=128, anchor_sizes=((32,), (64,), (128,)),
               rpn_batch_per_image=128, rpn_pre_nms_train=400, rpn_post_nms_train=96,
               rpn_pre_nms_test=300, rpn_post_nms_test=64, roi_batch_per_image=48,
               roi_positive_fraction=0.5)
    base = dict(preset="desk", n_bits=8, dictionary_size=16, dictionary_min_distance=3,
                marker_resolution=16, generator_channels=(16, 8, 6), rgb_init_std=0.5, image_size=256,
                schedule=sched, augment=AugmentConfig.mild(), detector=det, layouts=(1, 2, 3, 4))
    base.update(kw)
    return TrainConfig(**base)


PRESETS = {"paper": paper_config, "desk": desk_config}


# ---------------------------------------------------------------- data

def _rng(seed: int, *index) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *index]))


def synthesize_batch(generator: MarkerGenerator, cfg: TrainConfig, step: int, *,
                     messages=None, marker_ids=None, augment: AugmentConfig | None = None,
                     batch_size: int | None = None, stream: int = 0) -> list[SceneSample]:
    """Render and augment one batch of scenes.

    ``messages`` defaults to ``messages_per_iter`` fresh random messages;
    slot assignment samples them uniformly with replacement.
    """
    batch_size = batch_size or cfg.schedule.batch_size
    augment = augment or cfg.augment
    if messages is None:
        messages = sample_messages(cfg.schedule.messages_per_iter, int(_rng(cfg.seed, stream, step, 0).integers(2 ** 62)),
                                   cfg.n_bits)
    bits = torch.tensor(messages_to_array(messages))
    markers = generator(bits)
    presets = layout_presets()
    layouts = [presets[i] for i in cfg.layouts] if cfg.layouts else presets
    out = []
    for i in range(batch_size):
        rng = _rng(cfg.seed, stream, step, i + 1)
        scene = random_board_scene(rng, cfg.scene)
        layout = layouts[int(rng.integers(len(layouts)))]
        assignment = rng.integers(0, len(messages), size=len(layout.slots)).tolist()
        sample = place_markers(scene, layout, markers, assignment, messages=[m.bits for m in messages],
                               samples=cfg.samples, marker_ids=marker_ids)
        if cfg.scene.specular:
            mask = board_mask(scene)
            spec = random_specular(rng, scene, sample.image.detach(), cfg.scene, mask)
            sample = add_specular(sample, scene, spec, mask)
        sample.image_id = i
        aug_index = int(rng.integers(2 ** 31))
        out.append(apply_pipeline(sample, AugmentConfig(**{**asdict_shallow(augment),
                                                           "rng_seed": cfg.seed + stream}), aug_index))
    return out


def asdict_shallow(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


# ---------------------------------------------------------------- training loop

@dataclass
class TrainState:
    generator: MarkerGenerator
    detector: MarkerDetector
    optimizer: torch.optim.Optimizer
    stats: RunningStats
    step: int = 0
    nan_streak: int = 0
    skipped: int = 0


def build_state(cfg: TrainConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    gen = MarkerGenerator(cfg.generator_config())
    det = MarkerDetector(cfg.detector_config())
    params = [{"params": list(gen.parameters()), "lr_mult": cfg.generator_lr_mult},
              {"params": list(det.parameters()), "lr_mult": 1.0}]
    sched = cfg.schedule
    if sched.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=sched.lr, weight_decay=sched.weight_decay)
    else:
        opt = torch.optim.SGD(params, lr=sched.lr, momentum=sched.momentum, weight_decay=sched.weight_decay)
    return TrainState(gen, det, opt, RunningStats(cfg.ema_decay, cfg.clamp_warmup))


def compute_losses(out: RoiOutputs, stats: RunningStats | None, weights: LossWeights) -> LossReport:
    parts = {
        "rpn_class": out.rpn_class,
        "rpn_loc": out.rpn_loc,
        "sample": sampling_loss(out.gt_locations, out.sample_locations, out.fg),
        "corner": corner_loss(out.gt_corners, out.corners, out.fg),
        "objectness": objectness_loss(out.objectness, out.fg),
        "decode": decoding_loss(out.gt_bits, out.soft_bits, out.fg),
    }
    clamped = []
    if stats is not None:
        for name in LOSS_NAMES:
            v = parts[name]
            if not torch.isfinite(v):
                continue
            parts[name], hit = adaptive_clamp(v, stats, name)
            if hit:
                clamped.append(name)
    return total_loss(parts, weights, clamped)


def global_grad_norm(params) -> float:
    norms = [p.grad.detach().norm() for p in params if p.grad is not None]
    return float(torch.norm(torch.stack(norms))) if norms else 0.0


def train_step(state: TrainState, cfg: TrainConfig, batch: list[SceneSample] | None = None):
    """One optimisation step. Returns ``(LossReport | None, info)``; ``None``
    means the step was skipped (empty batch or non-finite loss)."""
    step = state.step
    lr = cfg.schedule.lr_at(step)
    for g in state.optimizer.param_groups:
        g["lr"] = lr * g.get("lr_mult", 1.0)
    state.generator.train()
    state.detector.train()
    if batch is None:
        batch = synthesize_batch(state.generator, cfg, step)
    batch = [s for s in batch if not s.empty]
    info = {"step": step, "lr": lr, "grad_norm": 0.0}
    if not batch:
        state.skipped += 1
        state.step += 1
        log.warning("step %d: empty batch skipped", step)
        return None, info
    images = torch.stack([s.image for s in batch])
    targets = [targets_from_annotations(s.annotations, s.size, images.dtype) for s in batch]
    gen = torch.Generator().manual_seed(int(_rng(cfg.seed, 7, step).integers(2 ** 62)))
    out = state.detector.forward_train(images, targets, generator=gen)
    with torch.no_grad():
        f = out.fg
        info["fg"] = int(f.sum())
        info["bit_acc"] = (float(((out.soft_bits[f] > 0.5) == (out.gt_bits[f] > 0.5)).double().mean())
                           if f.any() else float("nan"))
    try:
        report = compute_losses(out, state.stats, cfg.weights)
    except NonFiniteLoss as err:
        state.nan_streak += 1
        state.skipped += 1
        state.step += 1
        log.warning("step %d skipped: %s", step, err)
        return None, info
    state.nan_streak = 0
    state.optimizer.zero_grad(set_to_none=True)
    backward(report, state, cfg.generator_loss_terms)
    params = [p for g in state.optimizer.param_groups for p in g["params"]]
    info["grad_norm_raw"] = float(torch.nn.utils.clip_grad_norm_(params, cfg.schedule.grad_clip_norm))
    info["grad_norm"] = global_grad_norm(params)
    state.optimizer.step()
    state.step += 1
    report.total_tensor = None
    report.terms = {}
    return report, info


def backward(report: LossReport, state: TrainState, generator_terms=LOSS_NAMES) -> None:
    """Detector parameters get the gradient of the full weighted loss; the
    generator only that of ``generator_terms`` (default: the decoding term)."""
    if set(LOSS_NAMES) <= set(generator_terms):
        report.total_tensor.backward()
        return
    det = [p for p in state.detector.parameters() if p.requires_grad]
    gen = [p for p in state.generator.parameters() if p.requires_grad]
    report.total_tensor.backward(inputs=det, retain_graph=True)
    obj = [report.terms[n] for n in generator_terms if torch.is_tensor(report.terms.get(n))
           and report.terms[n].requires_grad]
    if obj:
        sum(obj).backward(inputs=gen)


# ---------------------------------------------------------------- checkpoints

def config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["schedule"] = TrainSchedule(**d["schedule"])
    d["augment"] = AugmentConfig(**d["augment"])
    d["scene"] = SceneConfig(**d["scene"])
    d["weights"] = LossWeights(**d["weights"])
    for k in ("generator_channels", "layouts", "generator_loss_terms"):
        if k in d:
            d[k] = tuple(d[k])
    det = dict(d.get("detector", {}))
    if "anchor_sizes" in det:
        det["anchor_sizes"] = tuple(tuple(s) for s in det["anchor_sizes"])
    d["detector"] = det
    return TrainConfig(**d)


def save_checkpoint(path, state: TrainState, cfg: TrainConfig) -> None:
    torch.save({
        "generator": state.generator.state_dict(),
        "detector": state.detector.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "stats": state.stats.state_dict(),
        "step": state.step,
        "skipped": state.skipped,
        "config": config_to_dict(cfg),
    }, path)


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    cfg = config_from_dict(blob["config"])
    state = build_state(cfg)
    state.generator.load_state_dict(blob["generator"])
    state.detector.load_state_dict(blob["detector"])
    state.optimizer.load_state_dict(blob["optimizer"])
    state.stats = RunningStats.from_state(blob["stats"])
    state.step = blob["step"]
    state.skipped = blob.get("skipped", 0)
    return state, cfg


def train(cfg: TrainConfig, out_dir=None, state: TrainState | None = None, steps: int | None = None,
          log_every: int = 50, callback=None) -> TrainState:
    """Run (or resume) training up to ``cfg.schedule.total_steps``.

    Writes ``metrics.csv`` and periodic ``checkpoint_<step>.pt`` plus
    ``final.pt`` into ``out_dir`` when given.
    """
    state = state or build_state(cfg)
    end = cfg.schedule.total_steps if steps is None else min(cfg.schedule.total_steps, state.step + steps)
    writer = fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "metrics.csv"
        new = not path.exists()
        fh = open(path, "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=["step", *LOSS_NAMES, "total", "lr", "grad_norm", "clamped"])
        if new:
            writer.writeheader()
    try:
        while state.step < end:
            report, info = train_step(state, cfg)
            if report is None:
                if state.nan_streak >= cfg.max_nan_steps:
                    raise NonFiniteLoss(f"{state.nan_streak} consecutive non-finite steps")
                continue
            if writer:
                writer.writerow({"step": info["step"], **report.as_row(), "lr": info["lr"],
                                 "grad_norm": info["grad_norm"], "clamped": "|".join(report.clamped_terms)})
            if info["step"] % log_every == 0:
                log.info("step %d total %.4f decode %.4f corner %.3f fg %d bit_acc %.3f lr %.5f",
                         info["step"], report.total, report.decode, report.corner, info.get("fg", 0),
                         info.get("bit_acc", float("nan")), info["lr"])
            if callback:
                callback(state, report, info)
            if out_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"checkpoint_{state.step}.pt", state, cfg)
    finally:
        if fh:
            fh.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "final.pt", state, cfg)
    return state


# ---------------------------------------------------------------- held-out evaluation

HELD_OUT_STREAM = 1


@torch.no_grad()
def held_out_records(state: TrainState, cfg: TrainConfig, dictionary: Dictionary, n_images: int = 64,
                     augment: AugmentConfig | None = None, chunk: int = 4, stream: int = HELD_OUT_STREAM,
                     identify_threshold: float | None = None):
    """Render ``n_images`` unseen scenes of dictionary markers and run detection.

    Returns ``(gt_records, det_records)``; scenes come from a random stream
    disjoint from the training stream.
    """
    from .records import detections_to_records, sample_to_records
    state.generator.eval()
    gts, dets = [], []
    for start in range(0, n_images, chunk):
        k = min(chunk, n_images - start)
        batch = synthesize_batch(state.generator, cfg, start, messages=list(dictionary.entries),
                                 marker_ids=list(range(len(dictionary))), augment=augment,
                                 batch_size=k, stream=stream)
        images = torch.stack([s.image for s in batch])
        found = state.detector.detect(images, dictionary, identify_threshold=identify_threshold)
        for j, (s, d) in enumerate(zip(batch, found)):
            gts += sample_to_records(s, start + j)
            dets += detections_to_records(d, start + j)
    state.generator.train()
    return gts, dets


def desk_dictionary(cfg: TrainConfig) -> Dictionary:
    return Dictionary.sampled(cfg.n_bits, cfg.dictionary_size, seed=cfg.seed,
                              min_distance=cfg.dictionary_min_distance)
