"""RoI pooling, corner head and deformation-aware decoding head.

Normalised RoI coordinates put the box centre at the origin and its edges
at -1/+1 on each axis.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import roi_align as _tv_roi_align

POOL = 12


def assign_levels(boxes: torch.Tensor, canonical_size: float = 64.0, canonical_level: int = 4,
                  min_level: int = 3, max_level: int = 5) -> torch.Tensor:
    """Pyramid level per box from its scale (0-based index into the pyramid)."""
    size = torch.sqrt(((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])).clamp_min(1e-6))
    lvl = torch.floor(canonical_level + torch.log2(size / canonical_size + 1e-8))
    return (lvl.clamp(min_level, max_level) - min_level).long()


def roi_align(pyramid: list, boxes: torch.Tensor, batch_idx: torch.Tensor, strides=(8, 16, 32),
              output_size: int = POOL, sampling_ratio: int = 2, canonical_size: float = 64.0):
    """Bilinear RoI pooling to ``output_size``^2 bins with 2x2 samples per bin.

    Each box reads from the level chosen by :func:`assign_levels`.
    """
    c = pyramid[0].shape[1]
    out = pyramid[0].new_zeros(boxes.shape[0], c, output_size, output_size)
    if boxes.shape[0] == 0:
        return out
    levels = assign_levels(boxes, canonical_size)
    rois = torch.cat([batch_idx[:, None].to(boxes), boxes], 1).to(pyramid[0].dtype)
    for lvl, (feat, stride) in enumerate(zip(pyramid, strides)):
        sel = torch.nonzero(levels == lvl).flatten()
        if sel.numel() == 0:
            continue
        pooled = _tv_roi_align(feat, rois[sel], output_size, spatial_scale=1.0 / stride,
                               sampling_ratio=sampling_ratio, aligned=True)
        out = out.index_put((sel,), pooled)
    return out


def to_roi_coords(points: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
    """Pixel points (N, ..., 2) -> normalised coordinates of the matching boxes (N, 4)."""
    shape = (-1,) + (1,) * (points.ndim - 2) + (2,)
    centre = ((boxes[:, :2] + boxes[:, 2:]) / 2).reshape(shape)
    half = ((boxes[:, 2:] - boxes[:, :2]) / 2).clamp_min(1e-6).reshape(shape)
    return (points - centre) / half


def from_roi_coords(points: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
    shape = (-1,) + (1,) * (points.ndim - 2) + (2,)
    centre = ((boxes[:, :2] + boxes[:, 2:]) / 2).reshape(shape)
    half = ((boxes[:, 2:] - boxes[:, :2]) / 2).reshape(shape)
    return points * half + centre


def uniform_lattice(samples: int, dtype=torch.float32) -> torch.Tensor:
    """(S, S, 2) cell centres of [-1, 1]^2."""
    t = (torch.arange(samples, dtype=dtype) + 0.5) / samples * 2 - 1
    gy, gx = torch.meshgrid(t, t, indexing="ij")
    return torch.stack([gx, gy], -1)


def resample(features: torch.Tensor, locations: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of (N, C, h, w) features at normalised (N, S, S, 2) locations."""
    return F.grid_sample(features, locations.to(features.dtype), mode="bilinear",
                         padding_mode="zeros", align_corners=False)


class CommonFC(nn.Module):
    def __init__(self, channels: int, hidden: int = 256):
        super().__init__()
        self.fc = nn.Linear(channels * POOL * POOL, hidden)

    def forward(self, pooled):
        return F.relu(self.fc(pooled.flatten(1)))


class DecodingHead(nn.Module):
    """Predicts the marker's sample grid inside the RoI, resamples the pooled
    features there and decodes bits plus objectness."""

    def __init__(self, channels: int, n_bits: int, samples: int = 9, common: int = 256):
        super().__init__()
        self.samples = samples
        self.resample1 = nn.Linear(common, 128)
        self.resample2 = nn.Linear(128, samples * samples * 2)
        self.fc3 = nn.Linear(channels * samples * samples, 512)
        self.fc4 = nn.Linear(512, 256)
        self.decoder = nn.Linear(256, n_bits)
        self.objectness = nn.Linear(256, 1)
        nn.init.normal_(self.resample2.weight, std=1e-3)
        with torch.no_grad():
            # markers fill most of a well-fitted box
            self.resample2.bias.copy_((uniform_lattice(samples) * 0.8).reshape(-1))

    def forward(self, pooled, common):
        s = self.samples
        loc = self.resample2(F.relu(self.resample1(common))).reshape(-1, s, s, 2)
        sampled = resample(pooled, loc)
        x = F.relu(self.fc4(F.relu(self.fc3(sampled.flatten(1)))))
        return loc, torch.sigmoid(self.decoder(x)), self.objectness(x)[:, 0]


# quadrant windows, TL TR BR BL
_QUADRANTS = ((-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5))


class CornerHead(nn.Module):
    """Four affine windows over low-level stem features, one per corner.

    Each window samples an 8x8 stem patch; a shared conv/FC stack predicts
    the corner inside the window frame, which the same affine maps back to
    the RoI frame.
    """
    patch = 8

    def __init__(self, stem_channels: int, common: int = 256, init_scale: float = 0.5):
        super().__init__()
        self.corner1 = nn.Linear(common, 128)
        self.corner2 = nn.Linear(128, 4 * 6)
        self.conv = nn.Conv2d(stem_channels, 32, 3, padding=0)
        self.fc5 = nn.Linear(32 * 6 * 6, 128)
        self.fc6 = nn.Linear(128, 64)
        self.predictor = nn.Linear(64, 2)
        nn.init.zeros_(self.corner2.weight)
        with torch.no_grad():
            self.corner2.bias.copy_(self.initial_affines(init_scale).reshape(-1))
        nn.init.zeros_(self.predictor.weight)
        nn.init.zeros_(self.predictor.bias)

    @staticmethod
    def initial_affines(scale: float = 0.5) -> torch.Tensor:
        return torch.tensor([[[scale, 0.0, cx], [0.0, scale, cy]] for cx, cy in _QUADRANTS])

    def affines(self, common) -> torch.Tensor:
        return self.corner2(F.relu(self.corner1(common))).reshape(-1, 4, 2, 3)

    def forward(self, common, stem, boxes, batch_idx, stem_stride: int = 4):
        n = boxes.shape[0]
        A = self.affines(common)                                      # (N, 4, 2, 3)
        base = uniform_lattice(self.patch, dtype=A.dtype)              # (8, 8, 2)
        homog = torch.cat([base, torch.ones_like(base[..., :1])], -1)  # (8, 8, 3)
        roi_pts = torch.einsum("nkij,abj->nkabi", A, homog)           # (N, 4, 8, 8, 2)
        px = from_roi_coords(roi_pts.reshape(n, -1, 2), boxes).reshape(n, 4, self.patch, self.patch, 2)
        hs, ws = stem.shape[-2:]
        norm = torch.stack([px[..., 0] / (ws * stem_stride), px[..., 1] / (hs * stem_stride)], -1) * 2 - 1
        patches = stem.new_zeros(n, 4, stem.shape[1], self.patch, self.patch)
        for b in torch.unique(batch_idx).tolist():
            sel = torch.nonzero(batch_idx == b).flatten()
            g = norm[sel].reshape(1, -1, self.patch, 2)
            s = F.grid_sample(stem[b:b + 1], g.to(stem.dtype), mode="bilinear",
                              padding_mode="zeros", align_corners=False)
            s = s.reshape(stem.shape[1], sel.numel(), 4, self.patch, self.patch).permute(1, 2, 0, 3, 4)
            patches = patches.index_put((sel,), s)
        x = F.relu(self.conv(patches.reshape(n * 4, stem.shape[1], self.patch, self.patch)))
        x = F.relu(self.fc6(F.relu(self.fc5(x.flatten(1)))))
        rel = self.predictor(x).reshape(n, 4, 2)
        corner_roi = torch.einsum("nkij,nkj->nki", A, torch.cat([rel, torch.ones_like(rel[..., :1])], -1))
        return from_roi_coords(corner_roi, boxes), corner_roi, A
