"""Message-to-marker generator network.

FC + pixel-norm front end, three upsample/conv/AdaIn blocks and a 1x1
sigmoid toRGB layer. Tensors follow torch's NCHW layout internally;
:meth:`MarkerGenerator.forward` returns NHWC markers so a batch of
32x32 RGB markers has shape (B, 32, 32, 3).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

EPS = 1e-8
NORMALIZATIONS = ("none", "pixel_norm", "adain_zero_pad", "adain_replicate")


@dataclass
class GeneratorConfig:
    n_bits: int = 36
    style_dim: int = 256
    stage_channels: list = field(default_factory=lambda: [16, 8, 6, 6])
    marker_resolution: int = 32
    normalization: str = "adain_zero_pad"
    leaky_slope: float = 0.2
    init_std: float = 0.02
    rgb_init_std: float | None = None   # None: same as init_std

    def __post_init__(self):
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        stages = len(self.stage_channels) - 1
        if stages < 1:
            raise ValueError("need at least one upsample stage")
        if self.marker_resolution != 4 * 2 ** stages:
            raise ValueError(
                f"marker_resolution {self.marker_resolution} != 4 * 2^{stages} "
                f"for stage_channels {self.stage_channels}")

    @property
    def n_stages(self) -> int:
        return len(self.stage_channels) - 1


def pixel_norm(x: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Divide each feature vector (last dim) by its RMS."""
    return x / torch.sqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)


def adain(features: torch.Tensor, style: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Adaptive instance normalisation on a (B, H, W, C) tensor.

    ``style`` is (B, 2C): the first C values scale, the last C shift.
    """
    c = features.shape[-1]
    if style.shape[-1] != 2 * c:
        raise ValueError(f"style needs {2 * c} values per item, got {style.shape[-1]}")
    scale, bias = style[:, None, None, :c], style[:, None, None, c:]
    mean = features.mean(dim=(1, 2), keepdim=True)
    var = features.var(dim=(1, 2), keepdim=True, unbiased=False)
    return (features - mean) / torch.sqrt(var + eps) * scale + bias


class _Block(nn.Module):
    def __init__(self, cin, cout, cfg: GeneratorConfig):
        super().__init__()
        self.replicate = cfg.normalization == "adain_replicate"
        self.conv = nn.Conv2d(cin, cout, 3, stride=1, padding=0 if self.replicate else 1)
        self.use_adain = cfg.normalization.startswith("adain")
        if self.use_adain:
            self.style = nn.Linear(cfg.style_dim, 2 * cout)
        self.slope = cfg.leaky_slope

    def forward(self, x, w):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        if self.replicate:
            x = F.pad(x, (1, 1, 1, 1), mode="replicate")
        x = F.leaky_relu(self.conv(x), self.slope)
        if self.use_adain:
            style = self.style(w)
            c = x.shape[1]
            # unit scale at init so the style starts as a pass-through
            style = style + torch.cat([torch.ones(c), torch.zeros(c)]).to(style)
            x = adain(x.permute(0, 2, 3, 1), style).permute(0, 3, 1, 2)
        return x


class MarkerGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or GeneratorConfig()
        ch = cfg.stage_channels
        self.fc1 = nn.Linear(cfg.n_bits, cfg.style_dim)
        self.fc2 = nn.Linear(cfg.style_dim, cfg.style_dim)
        # the reshape takes 4*4*ch0 values; with the default 256-wide FC1 that is exactly 4x4x16
        self.to_grid = (nn.Identity() if cfg.style_dim == 16 * ch[0]
                        else nn.Linear(cfg.style_dim, 16 * ch[0]))
        self.blocks = nn.ModuleList(_Block(ch[i], ch[i + 1], cfg) for i in range(cfg.n_stages))
        self.to_rgb = nn.Conv2d(ch[-1], 3, 1)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                nn.init.normal_(m.weight, 0.0, self.cfg.init_std)
                nn.init.zeros_(m.bias)
        if self.cfg.rgb_init_std is not None:
            nn.init.normal_(self.to_rgb.weight, 0.0, self.cfg.rgb_init_std)

    def features(self, bits: torch.Tensor) -> dict:
        """Forward pass returning every intermediate, for shape audits."""
        cfg = self.cfg
        if bits.ndim != 2 or bits.shape[1] != cfg.n_bits:
            raise ValueError(f"expected (B, {cfg.n_bits}) messages, got {tuple(bits.shape)}")
        bits = bits.to(self.fc1.weight.dtype)
        slope = cfg.leaky_slope
        h = self.fc1(bits)
        if cfg.normalization != "none":
            h = pixel_norm(h)
        h = F.leaky_relu(h, slope)
        w = F.leaky_relu(self.fc2(h), slope)
        x = self.to_grid(h).reshape(-1, cfg.stage_channels[0], 4, 4)
        out = {"fc1": h, "style": w, "reshape": x}
        for i, block in enumerate(self.blocks):
            x = block(x, w)
            out[f"block{i + 1}"] = x
        out["rgb"] = torch.sigmoid(self.to_rgb(x))
        return out

    def forward(self, bits: torch.Tensor) -> torch.Tensor:
        """(B, n_bits) bits in {0, 1} -> (B, R, R, 3) marker albedo in [0, 1]."""
        return self.features(bits)["rgb"].permute(0, 2, 3, 1)


def generate(messages, generator: MarkerGenerator) -> torch.Tensor:
    """Convenience wrapper accepting Message objects or bit arrays."""
    from .codec import Message

    if len(messages) and isinstance(messages[0], Message):
        bits = torch.tensor([m.bits for m in messages])
    else:
        bits = torch.as_tensor(messages)
    return generator(bits.to(generator.fc1.weight.dtype))
