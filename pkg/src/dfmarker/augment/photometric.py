"""Colour, blur and noise artifacts. Images are (B, 3, H, W) linear RGB."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F


def _t(v, like):
    return torch.as_tensor(v, dtype=like.dtype, device=like.device)


def hue_rotation_matrix(theta_deg) -> torch.Tensor:
    """3x3 rotation about the grey axis (1,1,1)/sqrt(3) by ``theta_deg`` degrees."""
    theta = torch.as_tensor(theta_deg) * (math.pi / 180.0)
    c, s = torch.cos(theta), torch.sin(theta)
    a = (1 - c) / 3
    b = s / math.sqrt(3)
    return torch.stack([
        torch.stack([c + a, a - b, a + b]),
        torch.stack([a + b, c + a, a - b]),
        torch.stack([a - b, a + b, c + a]),
    ])


def adjust_brightness(image, scale):
    return image * _t(scale, image).reshape(-1, 1, 1, 1)


def adjust_gamma(image, gamma, eps: float = 1e-6):
    g = _t(gamma, image).reshape(-1, 1, 1, 1)
    # eps keeps d/dx finite at black pixels
    return (image.clamp_min(0) + eps) ** g - eps ** g


def shift_hue(image, theta_deg):
    theta = torch.as_tensor(theta_deg, dtype=image.dtype)
    if theta.ndim == 0:
        return torch.einsum("ij,bjhw->bihw", hue_rotation_matrix(theta).to(image), image)
    mats = torch.stack([hue_rotation_matrix(t) for t in theta]).to(image)
    return torch.einsum("bij,bjhw->bihw", mats, image)


def photometric(image, brightness=1.0, gamma=1.0, hue_deg=0.0):
    """Brightness scale, then gamma, then hue rotation."""
    out = adjust_brightness(image, brightness)
    if not (isinstance(gamma, (int, float)) and gamma == 1.0):
        out = adjust_gamma(out, gamma)
    return shift_hue(out, hue_deg)


# ---------------------------------------------------------------- blur

def disc_kernel(radius, dtype=torch.float32, max_radius: int | None = None) -> torch.Tensor:
    """Normalised anti-aliased disc; weight falls off linearly over the last pixel
    so the kernel is differentiable in ``radius``."""
    radius = torch.as_tensor(radius, dtype=dtype)
    half = max_radius if max_radius is not None else int(math.ceil(float(radius))) + 1
    ax = torch.arange(-half, half + 1, dtype=dtype)
    yy, xx = torch.meshgrid(ax, ax, indexing="ij")
    dist = torch.sqrt(xx ** 2 + yy ** 2)
    w = (radius + 0.5 - dist).clamp(0, 1)
    return w / w.sum()


def line_kernel(length, angle_deg, dtype=torch.float32, max_half: int | None = None,
                samples: int = 64) -> torch.Tensor:
    """Normalised motion-blur kernel: a segment of ``length`` px at ``angle_deg``
    (0 = horizontal), splatted bilinearly so it is differentiable in both."""
    length = torch.as_tensor(length, dtype=dtype)
    ang = torch.as_tensor(angle_deg, dtype=dtype) * (math.pi / 180.0)
    half = max_half if max_half is not None else int(math.ceil(float(length) / 2)) + 1
    size = 2 * half + 1
    t = (torch.arange(samples, dtype=dtype) + 0.5) / samples - 0.5
    px = t * length * torch.cos(ang) + half
    py = t * length * torch.sin(ang) + half
    ax = torch.arange(size, dtype=dtype)
    wx = (1 - (px[:, None] - ax[None, :]).abs()).clamp_min(0)
    wy = (1 - (py[:, None] - ax[None, :]).abs()).clamp_min(0)
    k = torch.einsum("sy,sx->yx", wy, wx)
    return k / k.sum()


def convolve(image, kernel):
    """Per-channel convolution with replicate padding; kernel (kh, kw) odd-sized."""
    kh, kw = kernel.shape[-2:]
    b, c, h, w = image.shape
    if kh > h or kw > w:
        raise ValueError("blur kernel larger than the image")
    padded = F.pad(image, (kw // 2, kw // 2, kh // 2, kh // 2), mode="replicate")
    if kernel.ndim == 2:
        weight = kernel.to(image)[None, None].expand(c, 1, kh, kw)
        return F.conv2d(padded, weight, groups=c)
    # one kernel per batch item: fold batch into channels
    weight = kernel.to(image)[:, None, None].expand(b, c, 1, kh, kw).reshape(b * c, 1, kh, kw)
    out = F.conv2d(padded.reshape(1, b * c, *padded.shape[-2:]), weight, groups=b * c)
    return out.reshape(b, c, h, w)


def blur(image, kind: str, **params):
    if kind == "defocus":
        return convolve(image, disc_kernel(params["radius"], image.dtype))
    if kind == "motion":
        return convolve(image, line_kernel(params["length"], params.get("angle", 0.0), image.dtype))
    raise ValueError(f"unknown blur kind {kind!r}")


def add_noise(image, sigma, generator: torch.Generator | None = None):
    """Additive i.i.d. Gaussian noise; the gradient w.r.t. the image is the identity."""
    noise = torch.randn(image.shape, generator=generator, dtype=image.dtype)
    return image + _t(sigma, image).reshape(-1, 1, 1, 1) * noise
