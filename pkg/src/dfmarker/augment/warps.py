"""Differentiable geometric warps with matching point maps.

Coordinates are continuous pixel coordinates: pixel ``(i, j)`` covers
``[j, j+1) x [i, i+1)`` and its centre sits at ``(j + 0.5, i + 0.5)``.
Points are ``(..., 2)`` tensors in ``(x, y)`` order.

Every stage exposes

* ``forward(p)``  -- where a point of the input image lands in the output
  (used for labels), and
* ``backward(q)`` -- which input location an output pixel samples from
  (used for images).

Whichever direction has no closed form is solved with a fixed number of
Newton iterations so both stay differentiable.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch


class GeometryError(ValueError):
    pass


def pixel_grid(height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """(H, W, 2) pixel-centre coordinates."""
    ys = torch.arange(height, dtype=dtype, device=device) + 0.5
    xs = torch.arange(width, dtype=dtype, device=device) + 0.5
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def bilinear_sample(image: torch.Tensor, coords: torch.Tensor, padding: str = "border") -> torch.Tensor:
    """Sample ``image`` (B, C, H, W) at pixel coordinates ``coords`` (B, ..., 2).

    ``padding="border"`` replicates edge pixels, ``"zeros"`` treats everything
    outside the image as zero (with a linear fall-off over the last half pixel).
    Sampling exactly at pixel centres returns the stored values bit-exactly.
    """
    b, c, h, w = image.shape
    out_shape = coords.shape[1:-1]
    coords = coords.reshape(b, -1, 2)
    x = coords[..., 0] - 0.5
    y = coords[..., 1] - 0.5
    if padding == "border":
        x = x.clamp(0, w - 1)
        y = y.clamp(0, h - 1)
    elif padding != "zeros":
        raise ValueError(f"unknown padding {padding!r}")
    x0 = torch.floor(x).detach()
    y0 = torch.floor(y).detach()
    wx = x - x0
    wy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    flat = image.reshape(b, c, h * w)

    def tap(yi, xi):
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1))
        v = torch.gather(flat, 2, idx[:, None, :].expand(b, c, idx.shape[-1]))
        if padding == "zeros":
            v = v * valid[:, None, :].to(v.dtype)
        return v

    wx = wx[:, None, :]
    wy = wy[:, None, :]
    top = tap(y0, x0) * (1 - wx) + tap(y0, x0 + 1) * wx
    bot = tap(y0 + 1, x0) * (1 - wx) + tap(y0 + 1, x0 + 1) * wx
    out = top * (1 - wy) + bot * wy
    return out.reshape(b, c, *out_shape)


# ---------------------------------------------------------------- homographies

def apply_homography(H: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Map ``points`` (..., 2) through 3x3 ``H`` (broadcast over leading dims of H)."""
    ph = torch.cat([points, torch.ones_like(points[..., :1])], dim=-1)
    q = ph @ H.transpose(-1, -2)
    return q[..., :2] / q[..., 2:3]


def homography_from_points(src: torch.Tensor, dst: torch.Tensor) -> torch.Tensor:
    """Direct linear transform for 4 correspondences, differentiable in both.

    ``src``, ``dst``: (..., 4, 2). Returns H with ``dst ~ H @ src``, H[2,2] = 1.
    """
    x, y = src[..., 0], src[..., 1]
    u, v = dst[..., 0], dst[..., 1]
    zero = torch.zeros_like(x)
    one = torch.ones_like(x)
    rows_u = torch.stack([x, y, one, zero, zero, zero, -u * x, -u * y], dim=-1)
    rows_v = torch.stack([zero, zero, zero, x, y, one, -v * x, -v * y], dim=-1)
    A = torch.cat([rows_u, rows_v], dim=-2)
    rhs = torch.cat([u, v], dim=-1)
    for pts in (src, dst):
        if _has_collinear_triple(pts.detach()):
            raise GeometryError("degenerate homography: corner points are collinear")
    h = torch.linalg.solve(A, rhs[..., None])[..., 0]
    H = torch.cat([h, torch.ones_like(h[..., :1])], dim=-1)
    return H.reshape(*h.shape[:-1], 3, 3)


def _has_collinear_triple(quad: torch.Tensor, rel_tol: float = 1e-9) -> bool:
    q = quad.reshape(-1, 4, 2).double()
    scale = (q.amax(1) - q.amin(1)).amax(-1) ** 2 + 1e-300
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a, b, c = q[:, i], q[:, j], q[:, k]
        area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
        if torch.any(area.abs() <= rel_tol * scale):
            return True
    return False


def unit_square(dtype=torch.float32) -> torch.Tensor:
    return torch.tensor([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], dtype=dtype)


# ---------------------------------------------------------------- stages

class Stage:
    kind = "stage"

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def backward(self, points: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class HomographyStage(Stage):
    kind = "homography"

    def __init__(self, H: torch.Tensor):
        self.H = H

    def forward(self, points):
        return apply_homography(self.H.to(points.dtype), points)

    def backward(self, points):
        return apply_homography(torch.linalg.inv(self.H.to(points.dtype)), points)


class AffineStage(HomographyStage):
    """2x3 affine matrix acting on pixel coordinates."""
    kind = "affine"

    def __init__(self, A: torch.Tensor):
        self.A = A
        bottom = torch.tensor([[0.0, 0.0, 1.0]], dtype=A.dtype)
        super().__init__(torch.cat([A, bottom], dim=0))


@dataclass
class RadialParams:
    k1: float | torch.Tensor = 0.0
    k2: float | torch.Tensor = 0.0
    k3: float | torch.Tensor = 0.0
    center: Sequence[float] | torch.Tensor = (0.0, 0.0)
    focal: float | torch.Tensor = 1.0


def radial_distort(points: torch.Tensor, params: RadialParams) -> torch.Tensor:
    """Brown-Conrady radial distortion of pixel coordinates."""
    c = torch.as_tensor(params.center, dtype=points.dtype)
    n = (points - c) / params.focal
    r2 = (n * n).sum(-1, keepdim=True)
    scale = 1 + params.k1 * r2 + params.k2 * r2 ** 2 + params.k3 * r2 ** 3
    return c + n * scale * params.focal


def radial_undistort(points: torch.Tensor, params: RadialParams, iters: int = 20) -> torch.Tensor:
    """Inverse of :func:`radial_distort` by Newton iteration on the radius."""
    c = torch.as_tensor(params.center, dtype=points.dtype)
    nd = (points - c) / params.focal
    rd = torch.sqrt((nd * nd).sum(-1, keepdim=True) + 1e-30)
    r = rd
    for _ in range(iters):
        r2 = r * r
        f = r * (1 + params.k1 * r2 + params.k2 * r2 ** 2 + params.k3 * r2 ** 3) - rd
        df = 1 + 3 * params.k1 * r2 + 5 * params.k2 * r2 ** 2 + 7 * params.k3 * r2 ** 3
        r = r - f / df
    return c + nd * (r / rd) * params.focal


class RadialStage(Stage):
    kind = "radial"

    def __init__(self, params: RadialParams):
        self.params = params

    def forward(self, points):
        return radial_distort(points, self.params)

    def backward(self, points):
        return radial_undistort(points, self.params)


# ---------------------------------------------------------------- thin-plate splines

def _tps_kernel(r2: torch.Tensor) -> torch.Tensor:
    # U(r) = r^2 log r^2, with U(0) = 0
    safe = torch.where(r2 > 0, r2, torch.ones_like(r2))
    return torch.where(r2 > 0, r2 * torch.log(safe), torch.zeros_like(r2))


@dataclass
class TpsParams:
    """Thin-plate spline mapping ``dst_points`` onto ``src_points``.

    The system is solved in normalised coordinates ``(p - offset) / scale``
    for conditioning. ``weights`` (K, 2) are the kernel coefficients and
    ``affine`` (3, 2) the polynomial part acting on ``[1, x, y]``, both in
    normalised units.
    """
    src_points: torch.Tensor
    dst_points: torch.Tensor
    weights: torch.Tensor
    affine: torch.Tensor
    offset: torch.Tensor
    scale: float
    regularization: float = 0.0

    def __call__(self, points: torch.Tensor) -> torch.Tensor:
        return tps_apply(self, points)

    def _ctrl(self, dtype):
        return (self.dst_points.reshape(-1, 2).to(dtype) - self.offset.to(dtype)) / self.scale

    def bending_energy(self) -> torch.Tensor:
        ctrl = self._ctrl(self.weights.dtype)
        K = _tps_kernel(_sq_dist(ctrl, ctrl))
        return torch.einsum("ki,kl,li->", self.weights, K, self.weights)


def _sq_dist(a, b):
    d = a[:, None, :] - b[None, :, :]
    return (d * d).sum(-1)


def tps_fit(src_points: torch.Tensor, dst_points: torch.Tensor, regularization: float = 0.0) -> TpsParams:
    """Solve the TPS system so that ``tps(dst_points) == src_points``.

    ``regularization`` > 0 trades exact interpolation for lower bending energy
    (it is added to the kernel diagonal in normalised units).
    """
    src = src_points.reshape(-1, 2)
    dst = dst_points.reshape(-1, 2).to(src.dtype)
    k = dst.shape[0]
    if k < 3:
        raise GeometryError("TPS needs at least 3 control points")
    offset = dst.detach().mean(0)
    scale = float((dst.detach() - offset).abs().max()) or 1.0
    d = (dst - offset) / scale
    s = (src - offset) / scale
    P = torch.cat([torch.ones(k, 1, dtype=src.dtype), d], dim=1)
    if torch.linalg.matrix_rank(P.detach()) < 3:
        raise GeometryError("TPS control points are collinear")
    K = _tps_kernel(_sq_dist(d, d))
    if regularization:
        K = K + regularization * torch.eye(k, dtype=src.dtype)
    top = torch.cat([K, P], dim=1)
    bottom = torch.cat([P.T, torch.zeros(3, 3, dtype=src.dtype)], dim=1)
    L = torch.cat([top, bottom], dim=0)
    rhs = torch.cat([s, torch.zeros(3, 2, dtype=src.dtype)], dim=0)
    sol = torch.linalg.solve(L, rhs)
    return TpsParams(src_points, dst_points, sol[:k], sol[k:], offset, scale, regularization)


def tps_apply(params: TpsParams, points: torch.Tensor) -> torch.Tensor:
    dtype = points.dtype
    ctrl = params._ctrl(dtype)
    offset = params.offset.to(dtype)
    flat = (points.reshape(-1, 2) - offset) / params.scale
    U = _tps_kernel(_sq_dist(flat, ctrl))
    w, a = params.weights.to(dtype), params.affine.to(dtype)
    out = a[0] + flat @ a[1:] + U @ w
    return (out * params.scale + offset).reshape(points.shape)


def tps_jacobian(params: TpsParams, points: torch.Tensor) -> torch.Tensor:
    """(..., 2, 2) Jacobian d tps / d point, analytic."""
    dtype = points.dtype
    ctrl = params._ctrl(dtype)
    flat = (points.reshape(-1, 2) - params.offset.to(dtype)) / params.scale
    d = flat[:, None, :] - ctrl[None, :, :]
    r2 = (d * d).sum(-1)
    safe = torch.where(r2 > 0, r2, torch.ones_like(r2))
    # dU/dp = 2 d (log r^2 + 1)
    g = torch.where(r2 > 0, 2 * (torch.log(safe) + 1), torch.zeros_like(r2))
    dU = d * g[..., None]
    J = params.affine[1:].to(dtype).T[None] + torch.einsum("nkj,ki->nij", dU, params.weights.to(dtype))
    return J.reshape(*points.shape[:-1], 2, 2)


def tps_invert(params: TpsParams, targets: torch.Tensor, iters: int = 25,
               init: torch.Tensor | None = None) -> torch.Tensor:
    """Find ``p`` with ``tps(p) == targets`` by Newton iteration."""
    p = targets.clone() if init is None else init
    for _ in range(iters):
        f = tps_apply(params, p) - targets
        J = tps_jacobian(params, p)
        p = p - torch.linalg.solve(J, f[..., None])[..., 0]
    return p


class TpsStage(Stage):
    """Deformation defined by a backward TPS (output pixel -> source location)."""
    kind = "tps"

    def __init__(self, params: TpsParams):
        self.params = params

    def forward(self, points):
        # seed Newton with the map that inverts the control-point shifts
        approx = tps_fit(self.params.dst_points.to(points.dtype), self.params.src_points.to(points.dtype))
        return tps_invert(self.params, points, init=tps_apply(approx, points))

    def backward(self, points):
        return tps_apply(self.params, points)


def grid_control_points(height: int, width: int, grid: int, dtype=torch.float32) -> torch.Tensor:
    """(G*G, 2) uniform lattice spanning the image, edges included."""
    ys = torch.linspace(0, height, grid, dtype=dtype)
    xs = torch.linspace(0, width, grid, dtype=dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], -1).reshape(-1, 2)


# ---------------------------------------------------------------- chains

class WarpChain:
    """Ordered stages; the point map is ``stages[-1] o ... o stages[0]``."""

    def __init__(self, stages: Sequence[Stage] = ()):
        self.stages = list(stages)

    def __len__(self):
        return len(self.stages)

    def then(self, other: "WarpChain | Stage") -> "WarpChain":
        more = other.stages if isinstance(other, WarpChain) else [other]
        return WarpChain(self.stages + list(more))

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        for s in self.stages:
            points = s.forward(points)
        return points

    def backward(self, points: torch.Tensor) -> torch.Tensor:
        for s in reversed(self.stages):
            points = s.backward(points)
        return points

    @property
    def kinds(self) -> list[str]:
        return [s.kind for s in self.stages]


def warp_image(image: torch.Tensor, chain: WarpChain, out_size: tuple | None = None) -> torch.Tensor:
    """Backward-warp ``image`` (C, H, W) or (B, C, H, W) through ``chain``.

    One bilinear resampling for the whole chain; border replication outside.
    """
    squeeze = image.ndim == 3
    if squeeze:
        image = image[None]
    h, w = out_size or image.shape[-2:]
    grid = pixel_grid(h, w, dtype=image.dtype)
    src = chain.backward(grid) if len(chain) else grid
    out = bilinear_sample(image, src.expand(image.shape[0], h, w, 2), padding="border")
    return out[0] if squeeze else out
