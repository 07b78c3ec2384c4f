"""Small depthwise-separable backbone with a lite FPN.

Any module returning :class:`BackboneFeatures` with a stride-4 stem and
stride 8/16/32 pyramid levels of equal width can replace it.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

STRIDES = (8, 16, 32)


@dataclass
class BackboneFeatures:
    stem: torch.Tensor        # (B, C_stem, H/4, W/4)
    pyramid: list             # [(B, C_fpn, H/s, W/s) for s in 8, 16, 32]
    crop: tuple = (0, 0)      # rows/cols of padding added on the bottom/right


def _norm(c):
    return nn.GroupNorm(min(8, c), c)


class SeparableConv(nn.Sequential):
    def __init__(self, cin, cout, stride=1, act=True):
        layers = [nn.Conv2d(cin, cin, 3, stride, 1, groups=cin, bias=False), _norm(cin),
                  nn.Conv2d(cin, cout, 1, bias=False), _norm(cout)]
        if act:
            layers.append(nn.ReLU(inplace=True))
        super().__init__(*layers)


class LiteBackbone(nn.Module):
    def __init__(self, stem_channels: int = 64, fpn_channels: int = 128,
                 widths: tuple = (96, 128, 192)):
        super().__init__()
        self.stem_channels = stem_channels
        self.fpn_channels = fpn_channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, 32, 3, 2, 1, bias=False), _norm(32), nn.ReLU(inplace=True),
            SeparableConv(32, stem_channels, stride=2),
            SeparableConv(stem_channels, stem_channels))
        w8, w16, w32 = widths
        self.c3 = nn.Sequential(SeparableConv(stem_channels, w8, 2), SeparableConv(w8, w8))
        self.c4 = nn.Sequential(SeparableConv(w8, w16, 2), SeparableConv(w16, w16))
        self.c5 = nn.Sequential(SeparableConv(w16, w32, 2), SeparableConv(w32, w32))
        self.lateral = nn.ModuleList(nn.Conv2d(c, fpn_channels, 1) for c in widths)
        self.output = nn.ModuleList(SeparableConv(fpn_channels, fpn_channels, act=False) for _ in widths)

    def forward(self, image: torch.Tensor) -> BackboneFeatures:
        """``image`` (B, 3, H, W) in [0, 1]. Sizes not divisible by 32 are
        reflect-padded on the bottom/right; the padding is recorded in ``crop``."""
        h, w = image.shape[-2:]
        ph, pw = (-h) % 32, (-w) % 32
        if ph or pw:
            image = F.pad(image, (0, pw, 0, ph), mode="reflect")
        x = image - 0.5
        stem = self.stem(x)
        c3 = self.c3(stem)
        c4 = self.c4(c3)
        c5 = self.c5(c4)
        laterals = [l(c) for l, c in zip(self.lateral, (c3, c4, c5))]
        outs = [laterals[2]]
        for lat in (laterals[1], laterals[0]):
            outs.insert(0, lat + F.interpolate(outs[0], size=lat.shape[-2:], mode="nearest"))
        pyramid = [o(p) for o, p in zip(self.output, outs)]
        return BackboneFeatures(stem, pyramid, (ph, pw))
