"""Board scenes, marker placement and shading.

All images here are linear-light (3, H, W) tensors; :func:`gamma_encode`
turns them into display values at the very end of the augmentation chain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .augment.warps import (GeometryError, apply_homography, bilinear_sample,
                            homography_from_points, pixel_grid, unit_square)

GAMMA = 2.2
_GAMMA_KNEE = 1e-6
LUMA = (0.2126, 0.7152, 0.0722)


# ---------------------------------------------------------------- data types

@dataclass
class MarkerAnnotation:
    marker_id: int
    message: tuple
    corners: torch.Tensor        # (4, 2) px, TL TR BR BL
    sample_grid: torch.Tensor    # (S, S, 2) px

    @property
    def box(self) -> torch.Tensor:
        return torch.cat([self.corners.min(0).values, self.corners.max(0).values])

    def replace(self, corners, sample_grid) -> "MarkerAnnotation":
        return MarkerAnnotation(self.marker_id, self.message, corners, sample_grid)


@dataclass
class SceneSample:
    image: torch.Tensor                      # (3, H, W)
    annotations: list
    image_id: int = 0
    empty: bool = False
    dropped: list = field(default_factory=list)

    @property
    def size(self) -> tuple:
        return tuple(self.image.shape[-2:])


@dataclass
class BoardScene:
    background: torch.Tensor      # (3, H, W) linear
    board_quad: torch.Tensor      # (4, 2) px, TL TR BR BL
    board_radiance: torch.Tensor  # (3, H, W) light reflected by the bare board
    rho_p: torch.Tensor           # (3,)
    normal_map: torch.Tensor      # (H, W, 3)
    camera_dir: torch.Tensor      # (H, W, 3) or (3,), camera -> surface

    def __post_init__(self):
        q = self.board_quad.detach().double()
        if _signed_area(q) <= 0:
            raise GeometryError("board quad must be counter-clockwise (TL, TR, BR, BL)")
        if not _is_convex(q):
            raise GeometryError("board quad must be convex")
        if torch.any(self.rho_p <= 0) or torch.any(self.rho_p > 1):
            raise ValueError("board albedo must lie in (0, 1]")

    @property
    def size(self) -> tuple:
        return tuple(self.background.shape[-2:])


@dataclass
class LayoutConfig:
    """Marker rectangles ``(x0, y0, x1, y1)`` in unit board coordinates."""
    slots: list
    preset_id: int = 0

    def __post_init__(self):
        for r in self.slots:
            x0, y0, x1, y1 = r
            if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
                raise ValueError(f"slot {r} is not inside the unit board")
        for i, a in enumerate(self.slots):
            for b in self.slots[i + 1:]:
                if a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]:
                    raise ValueError(f"slots {a} and {b} overlap")


@dataclass
class SpecularParams:
    roughness: float
    specular_albedo: float
    light_dir: torch.Tensor
    light_color: torch.Tensor
    intensity: float = 1.0


def _signed_area(q) -> float:
    x, y = q[:, 0], q[:, 1]
    return float(0.5 * (x * torch.roll(y, -1) - torch.roll(x, -1) * y).sum())


def _is_convex(q) -> bool:
    signs = []
    for i in range(4):
        a, b, c = q[i], q[(i + 1) % 4], q[(i + 2) % 4]
        signs.append(float((b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])))
    return all(s > 0 for s in signs) or all(s < 0 for s in signs)


def layout_presets(margin: float = 0.1) -> list[LayoutConfig]:
    """Grid layouts with each marker inset by ``margin`` of its slot size."""
    grids = [(1, 1), (2, 2), (3, 3), (2, 3), (3, 2), (1, 2), (2, 1)]
    out = []
    for pid, (rows, cols) in enumerate(grids):
        side = min(1 / rows, 1 / cols)
        slots = []
        for r in range(rows):
            for c in range(cols):
                cx, cy = (c + 0.5) / cols, (r + 0.5) / rows
                half = side * (0.5 - margin)
                slots.append((cx - half, cy - half, cx + half, cy + half))
        out.append(LayoutConfig(slots, pid))
    return out


# ---------------------------------------------------------------- gamma

def gamma_encode(x: torch.Tensor) -> torch.Tensor:
    """Linear -> display values, x^(1/2.2) clamped to [0, 1].

    Below a tiny knee the curve is linear so the gradient stays finite at 0.
    """
    x = x.clamp(0, 1)
    slope = _GAMMA_KNEE ** (1 / GAMMA) / _GAMMA_KNEE
    return torch.where(x > _GAMMA_KNEE, x.clamp_min(_GAMMA_KNEE) ** (1 / GAMMA), x * slope)


def gamma_decode(y: torch.Tensor) -> torch.Tensor:
    knee = _GAMMA_KNEE ** (1 / GAMMA)
    slope = knee / _GAMMA_KNEE
    y = y.clamp(0, 1)
    return torch.where(y > knee, y.clamp_min(knee) ** GAMMA, y / slope)


# ---------------------------------------------------------------- shading

def shade_diffuse(board_pixels, marker_albedo, rho_p):
    """Radiance of a marker printed on the board: board radiance * rho_t / rho_p.

    Albedos broadcast against ``board_pixels`` along the channel axis
    (last axis for HWC inputs, first for CHW when shaped (3, 1, 1)).
    """
    rho_p = torch.as_tensor(rho_p, dtype=board_pixels.dtype)
    if torch.any(rho_p <= 0):
        raise ValueError("rho_p must be positive")
    return board_pixels * marker_albedo / rho_p


def _normalize(v, dim=-1):
    return v / torch.linalg.norm(v, dim=dim, keepdim=True).clamp_min(1e-12)


def ggx_ndf(n_dot_h, roughness):
    a2 = roughness ** 2
    denom = n_dot_h ** 2 * (a2 - 1) + 1
    return a2 / (math.pi * denom ** 2)


def smith_g1(n_dot_x, roughness):
    a2 = roughness ** 2
    return 2 * n_dot_x / (n_dot_x + torch.sqrt(a2 + (1 - a2) * n_dot_x ** 2))


def schlick_fresnel(v_dot_h, f0):
    return f0 + (1 - f0) * (1 - v_dot_h).clamp(0, 1) ** 5


def ggx_specular(normals, view_dir, params: SpecularParams):
    """Cook-Torrance/GGX highlight as an additive (H, W, 3) radiance layer.

    ``view_dir`` points from the surface to the camera. The BRDF is
    multiplied by the cosine of the light angle, light colour and intensity;
    pixels where the light or the viewer is below the horizon get zero.
    """
    n = _normalize(normals)
    v = _normalize(torch.as_tensor(view_dir, dtype=n.dtype).expand_as(n))
    l = _normalize(torch.as_tensor(params.light_dir, dtype=n.dtype)).expand_as(n)
    h = _normalize(v + l)
    nv = (n * v).sum(-1)
    nl = (n * l).sum(-1)
    nh = (n * h).sum(-1).clamp(0, 1)
    vh = (v * h).sum(-1).clamp(0, 1)
    visible = (nv > 1e-6) & (nl > 1e-6)
    nv_c = nv.clamp_min(1e-6)
    nl_c = nl.clamp_min(1e-6)
    alpha = params.roughness
    brdf = (ggx_ndf(nh, alpha) * schlick_fresnel(vh, params.specular_albedo)
            * smith_g1(nv_c, alpha) * smith_g1(nl_c, alpha) / (4 * nv_c * nl_c))
    radiance = torch.where(visible, brdf * nl_c, torch.zeros_like(brdf))
    color = torch.as_tensor(params.light_color, dtype=n.dtype)
    return radiance[..., None] * color * params.intensity


def reflect(d, n):
    return d - 2 * (d * n).sum(-1, keepdim=True) * n


def board_mask(scene: BoardScene) -> torch.Tensor:
    h, w = scene.size
    return quad_coverage(scene.board_quad, h, w, scene.background.dtype)


def pick_light_from_brightest(scene: BoardScene, mask: Optional[torch.Tensor] = None):
    """Light direction mirrored about the normal at the brightest board pixel.

    Returns ``(light_dir, light_color)`` with the colour scaled to unit max.
    Ties go to the first pixel in row-major order.
    """
    mask = board_mask(scene) if mask is None else mask
    radiance = scene.board_radiance
    luma = torch.einsum("c,chw->hw", torch.tensor(LUMA, dtype=radiance.dtype), radiance)
    inside = mask > 0.5
    if not torch.any(inside):
        raise ValueError("board region is empty")
    score = torch.where(inside, luma, torch.full_like(luma, -math.inf))
    idx = int(torch.argmax(score.reshape(-1)))
    i, j = divmod(idx, luma.shape[1])
    cam = scene.camera_dir if scene.camera_dir.ndim == 1 else scene.camera_dir[i, j]
    light_dir = _normalize(reflect(_normalize(cam), _normalize(scene.normal_map[i, j])))
    color = radiance[:, i, j]
    return light_dir, color / color.max().clamp_min(1e-12)


def bound_specular_intensity(diffuse_layer, highlight_shape) -> float:
    """Largest s >= 0 with max(diffuse + s * highlight) == 1 (inf if no highlight)."""
    d = diffuse_layer.detach().double().reshape(-1)
    hl = highlight_shape.detach().double().reshape(-1)
    pos = hl > 0
    if not torch.any(pos):
        return math.inf
    s = ((1 - d[pos]) / hl[pos]).min()
    return max(float(s), 0.0)


# ---------------------------------------------------------------- geometry helpers

def quad_coverage(quad: torch.Tensor, height: int, width: int, dtype=torch.float32) -> torch.Tensor:
    """Approximate pixel coverage (H, W) of a convex TL-TR-BR-BL quad with a 1 px ramp."""
    p = pixel_grid(height, width, dtype=dtype)
    q = quad.to(dtype)
    cov = torch.ones(height, width, dtype=dtype)
    for i in range(4):
        a, b = q[i], q[(i + 1) % 4]
        e = b - a
        length = torch.linalg.norm(e).clamp_min(1e-12)
        # interior is on the right of each edge in y-down image coordinates
        dist = ((p[..., 0] - a[0]) * e[1] - (p[..., 1] - a[1]) * e[0]) / length
        cov = cov * (0.5 - dist).clamp(0, 1)
    return cov


def lattice(samples: int, dtype=torch.float32) -> torch.Tensor:
    """(S, S, 2) cell-centre lattice on the unit square."""
    t = (torch.arange(samples, dtype=dtype) + 0.5) / samples
    gy, gx = torch.meshgrid(t, t, indexing="ij")
    return torch.stack([gx, gy], -1)


def slot_homography(board_H: torch.Tensor, rect) -> torch.Tensor:
    """Marker unit square -> image px for a slot rect in board coordinates."""
    x0, y0, x1, y1 = rect
    S = torch.tensor([[x1 - x0, 0, x0], [0, y1 - y0, y0], [0, 0, 1]], dtype=board_H.dtype)
    return board_H @ S


# ---------------------------------------------------------------- placement

def place_markers(scene: BoardScene, layout: LayoutConfig, markers: torch.Tensor,
                  assignment: Sequence[int], messages=None, samples: int = 9,
                  marker_ids: Optional[Sequence[int]] = None,
                  specular: Optional[SpecularParams] = None) -> SceneSample:
    """Render markers (N, R, R, 3) into ``scene`` following ``layout``.

    ``assignment[k]`` is the index into ``markers`` for slot ``k``;
    ``marker_ids`` optionally renames those indices (e.g. dictionary ids).
    """
    if len(assignment) != len(layout.slots):
        raise ValueError("assignment must cover every slot")
    if any(not 0 <= a < len(markers) for a in assignment):
        raise ValueError("assignment references a missing marker")
    h, w = scene.size
    dtype = scene.background.dtype
    board_H = homography_from_points(unit_square(torch.float64), scene.board_quad.double())
    bmask = quad_coverage(scene.board_quad, h, w, dtype)
    rho_p = scene.rho_p.to(dtype).reshape(3, 1, 1)
    res = markers.shape[1]
    albedo = torch.zeros(3, h, w, dtype=dtype)
    alpha = torch.zeros(h, w, dtype=dtype)
    annotations = []
    tex = markers.permute(0, 3, 1, 2).to(dtype)
    grid_unit = lattice(samples, torch.float64)
    for slot, (rect, k) in enumerate(zip(layout.slots, assignment)):
        Hs = slot_homography(board_H, rect)
        corners = apply_homography(Hs, unit_square(torch.float64))
        x0, y0 = [max(int(math.floor(float(v))) - 1, 0) for v in corners.min(0).values]
        x1 = min(int(math.ceil(float(corners[:, 0].max()))) + 1, w)
        y1 = min(int(math.ceil(float(corners[:, 1].max()))) + 1, h)
        if x1 <= x0 or y1 <= y0:
            raise GeometryError("marker slot falls outside the image")
        cov = quad_coverage(corners, h, w, dtype)[y0:y1, x0:x1]
        pts = pixel_grid(h, w, dtype=torch.float64)[y0:y1, x0:x1]
        uv = apply_homography(torch.linalg.inv(Hs), pts) * res
        sampled = bilinear_sample(tex[k:k + 1], uv[None].to(dtype), padding="border")[0]
        pad = (x0, w - x1, y0, h - y1)
        albedo = albedo + F.pad(sampled * cov, pad)
        alpha = alpha + F.pad(cov, pad)
        mid = marker_ids[k] if marker_ids is not None else k
        msg = tuple(messages[k]) if messages is not None else ()
        annotations.append(MarkerAnnotation(
            int(mid), msg, corners.to(torch.float64),
            apply_homography(Hs, grid_unit).to(torch.float64)))
    board = scene.board_radiance
    alpha = alpha.clamp(0, 1)
    surface = board * (1 - alpha) + shade_diffuse(board, albedo, rho_p)
    image = scene.background * (1 - bmask) + surface * bmask
    sample = SceneSample(image, annotations)
    return add_specular(sample, scene, specular, bmask) if specular is not None else sample


def add_specular(sample: SceneSample, scene: BoardScene, params: SpecularParams,
                 mask: torch.Tensor | None = None) -> SceneSample:
    dtype = sample.image.dtype
    mask = board_mask(scene).to(dtype) if mask is None else mask
    layer = ggx_specular(scene.normal_map.to(dtype), -scene.camera_dir.to(dtype), params)
    image = sample.image + layer.permute(2, 0, 1) * mask
    return SceneSample(image, sample.annotations, sample.image_id, sample.empty, sample.dropped)


# ---------------------------------------------------------------- procedural scenes

@dataclass
class SceneConfig:
    height: int = 256
    width: int = 256
    board_min: float = 0.55
    board_max: float = 0.9
    board_tilt: float = 0.12
    rho_p: tuple = (0.95, 0.95, 0.95)
    normal_sigma_deg: float = 2.0
    specular: bool = True
    roughness_min: float = 0.05
    roughness_max: float = 0.5
    specular_albedo_min: float = 0.02
    specular_albedo_max: float = 0.1
    irradiance_min: float = 0.45
    irradiance_max: float = 0.95


def _smooth_noise(rng: np.random.Generator, h, w, cells, channels=1):
    coarse = torch.tensor(rng.random((1, channels, cells, cells)), dtype=torch.float32)
    return F.interpolate(coarse, size=(h, w), mode="bicubic", align_corners=False)[0]


def random_background(rng: np.random.Generator, h: int, w: int) -> torch.Tensor:
    """Smooth gradient plus multi-scale value noise, linear light."""
    yy, xx = torch.meshgrid(torch.linspace(0, 1, h), torch.linspace(0, 1, w), indexing="ij")
    base = torch.tensor(rng.uniform(0.05, 0.6, size=(3, 1, 1)), dtype=torch.float32)
    ramp = torch.tensor(rng.uniform(-0.3, 0.3, size=(3, 2)), dtype=torch.float32)
    img = base + ramp[:, :1, None] * xx + ramp[:, 1:, None] * yy
    for cells, amp in ((4, 0.25), (16, 0.15), (48, 0.08)):
        img = img + amp * (_smooth_noise(rng, h, w, cells, 3) - 0.5)
    return img.clamp(0.005, 1.0) ** 1.5


def random_board_quad(rng: np.random.Generator, h: int, w: int, cfg: SceneConfig) -> torch.Tensor:
    side = rng.uniform(cfg.board_min, cfg.board_max) * min(h, w)
    cx = rng.uniform(side / 2, w - side / 2)
    cy = rng.uniform(side / 2, h - side / 2)
    ang = rng.uniform(-math.pi, math.pi) * 0.1
    base = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=np.float64) * side / 2
    rot = np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
    quad = base @ rot.T + rng.uniform(-cfg.board_tilt, cfg.board_tilt, size=(4, 2)) * side / 2
    quad += [cx, cy]
    quad[:, 0] = np.clip(quad[:, 0], 1, w - 1)
    quad[:, 1] = np.clip(quad[:, 1], 1, h - 1)
    return torch.tensor(quad, dtype=torch.float64)


def random_board_scene(rng: np.random.Generator, cfg: SceneConfig | None = None) -> BoardScene:
    cfg = cfg or SceneConfig()
    h, w = cfg.height, cfg.width
    background = random_background(rng, h, w)
    for _ in range(20):
        quad = random_board_quad(rng, h, w, cfg)
        if _signed_area(quad) > 0 and _is_convex(quad):
            break
    else:
        raise GeometryError("could not sample a convex board")
    # uneven illumination over the board: planar ramp + soft blotches, slight tint
    yy, xx = torch.meshgrid(torch.linspace(-1, 1, h), torch.linspace(-1, 1, w), indexing="ij")
    level = rng.uniform(cfg.irradiance_min, cfg.irradiance_max)
    g = rng.uniform(-0.25, 0.25, size=2)
    irr = level * (1 + g[0] * xx + g[1] * yy) + 0.15 * (_smooth_noise(rng, h, w, 3)[0] - 0.5)
    tint = torch.tensor(1 + rng.uniform(-0.08, 0.08, size=3), dtype=torch.float32)
    rho_p = torch.tensor(cfg.rho_p, dtype=torch.float32)
    board_radiance = ((rho_p * tint).reshape(3, 1, 1) * irr.clamp(0.05, 1.0)[None]).clamp(max=1.0)
    # camera rays of a pinhole with focal = image width, looking down -z
    f = float(w)
    px = pixel_grid(h, w)
    rays = torch.cat([(px - torch.tensor([w / 2, h / 2])) / f * torch.tensor([1.0, -1.0]),
                      -torch.ones(h, w, 1)], dim=-1)
    camera_dir = _normalize(rays)
    tilt = rng.normal(0, 0.25, size=2)
    base_n = _normalize(torch.tensor([tilt[0], tilt[1], 1.0], dtype=torch.float32))
    jitter = torch.tensor(rng.normal(0, math.radians(cfg.normal_sigma_deg), size=(h, w, 2)),
                          dtype=torch.float32)
    normals = _normalize(base_n + torch.cat([jitter, torch.zeros(h, w, 1)], -1))
    return BoardScene(background, quad, board_radiance, rho_p, normals, camera_dir)


def random_specular(rng: np.random.Generator, scene: BoardScene, diffuse: torch.Tensor,
                    cfg: SceneConfig, mask: torch.Tensor | None = None) -> SpecularParams:
    """Sample roughness/albedo, light from the brightest board point and an
    intensity uniform in [0, saturation bound]."""
    mask = board_mask(scene) if mask is None else mask
    light_dir, color = pick_light_from_brightest(scene, mask)
    brightness = float((scene.board_radiance.mean(0) * mask).sum() / mask.sum().clamp_min(1))
    alpha = math.exp(rng.uniform(math.log(cfg.roughness_min), math.log(cfg.roughness_max)))
    params = SpecularParams(alpha, rng.uniform(cfg.specular_albedo_min, cfg.specular_albedo_max),
                            light_dir, color * brightness, 1.0)
    shape = ggx_specular(scene.normal_map, -scene.camera_dir, params).permute(2, 0, 1) * mask
    s = bound_specular_intensity(diffuse * mask, shape)
    s = min(s, 1.0) if math.isfinite(s) else 0.0
    params.intensity = rng.uniform(0.0, s)
    return params
