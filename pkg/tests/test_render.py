import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from _grad import probe_gradient, weighted_sum
from dfmarker.augment.warps import GeometryError, apply_homography, homography_from_points, unit_square
from dfmarker.render import (BoardScene, LayoutConfig, SceneConfig, SpecularParams, bound_specular_intensity,
                             gamma_decode, gamma_encode, ggx_ndf, ggx_specular, layout_presets, place_markers,
                             pick_light_from_brightest, random_board_scene, random_specular, shade_diffuse)


def flat_scene(h=32, w=32, quad=None, radiance=0.8, dtype=torch.float64):
    quad = torch.tensor([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]], dtype=torch.float64) if quad is None else quad
    normals = torch.zeros(h, w, 3, dtype=dtype)
    normals[..., 2] = 1
    return BoardScene(torch.zeros(3, h, w, dtype=dtype), quad, torch.full((3, h, w), radiance, dtype=dtype),
                      torch.ones(3, dtype=dtype), normals, torch.tensor([0.0, 0.0, -1.0], dtype=dtype))


def test_shade_diffuse_examples():
    board = torch.tensor([0.8])
    assert float(shade_diffuse(board, torch.tensor([0.5]), torch.tensor([1.0]))) == pytest.approx(0.4)
    x = torch.rand(4, 4, 3)
    rho = torch.tensor([0.9, 0.8, 0.7])
    assert torch.allclose(shade_diffuse(x, rho, rho), x)
    with pytest.raises(ValueError):
        shade_diffuse(x, rho, torch.tensor([0.0, 1.0, 1.0]))


def test_shade_diffuse_gradient():
    board = torch.rand(5, 5, 3, dtype=torch.float64)
    rho_p = torch.tensor([0.9, 0.8, 0.95], dtype=torch.float64)
    rho_t = torch.rand(5, 5, 3, dtype=torch.float64, requires_grad=True)
    out = shade_diffuse(board, rho_t, rho_p).sum()
    (g,) = torch.autograd.grad(out, rho_t)
    assert torch.allclose(g, board / rho_p, atol=1e-12)
    assert probe_gradient(lambda t: weighted_sum()(shade_diffuse(board, t, rho_p)), [rho_t]) < 1e-4


def test_identity_placement_full_board():
    scene = flat_scene()
    layout = LayoutConfig([(0.0, 0.0, 1.0, 1.0)])
    markers = torch.rand(1, 8, 8, 3, dtype=torch.float64)
    s = place_markers(scene, layout, markers, [0])
    expected = torch.tensor([[0.0, 0.0], [32.0, 0.0], [32.0, 32.0], [0.0, 32.0]], dtype=torch.float64)
    assert torch.allclose(s.annotations[0].corners, expected, atol=1e-9)


def test_placement_matches_point_transform():
    quad = torch.tensor([[10.0, 12.0], [100.0, 8.0], [110.0, 90.0], [6.0, 100.0]], dtype=torch.float64)
    scene = flat_scene(128, 128, quad)
    layout = layout_presets()[1]
    markers = torch.rand(2, 8, 8, 3, dtype=torch.float64)
    s = place_markers(scene, layout, markers, [0, 1, 1, 0], samples=5)
    H = homography_from_points(unit_square(), quad)
    for rect, a in zip(layout.slots, s.annotations):
        x0, y0, x1, y1 = rect
        board_pts = torch.tensor([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=torch.float64)
        assert torch.allclose(a.corners, apply_homography(H, board_pts), atol=1e-9)
        t = (torch.arange(5, dtype=torch.float64) + 0.5) / 5
        gy, gx = torch.meshgrid(y0 + t * (y1 - y0), x0 + t * (x1 - x0), indexing="ij")
        assert torch.allclose(a.sample_grid, apply_homography(H, torch.stack([gx, gy], -1)), atol=1e-9)


def test_label_fidelity_inverse_homography():
    quad = torch.tensor([[20.0, 30.0], [200.0, 10.0], [220.0, 230.0], [5.0, 200.0]], dtype=torch.float64)
    scene = flat_scene(256, 256, quad)
    layout = LayoutConfig([(0.2, 0.3, 0.7, 0.8)])
    s = place_markers(scene, layout, torch.rand(1, 8, 8, 3, dtype=torch.float64), [0])
    H = homography_from_points(unit_square(), quad)
    back = apply_homography(torch.linalg.inv(H), s.annotations[0].corners)
    expected = torch.tensor([[0.2, 0.3], [0.7, 0.3], [0.7, 0.8], [0.2, 0.8]], dtype=torch.float64)
    assert (back - expected).abs().max() < 1e-5


def test_same_marker_twice_keeps_id():
    scene = flat_scene(64, 64)
    layout = layout_presets()[5]
    s = place_markers(scene, layout, torch.rand(4, 8, 8, 3), [3, 3], marker_ids=[0, 1, 2, 3])
    assert [a.marker_id for a in s.annotations] == [3, 3]


def test_degenerate_board_rejected():
    quad = torch.tensor([[0.0, 0.0], [10.0, 0.0], [20.0, 0.0], [5.0, 0.0]], dtype=torch.float64)
    with pytest.raises(GeometryError):
        flat_scene(32, 32, quad)


def test_layout_validation():
    with pytest.raises(ValueError):
        LayoutConfig([(0.0, 0.0, 0.6, 0.6), (0.5, 0.5, 1.0, 1.0)])
    with pytest.raises(ValueError):
        LayoutConfig([(-0.1, 0.0, 0.5, 0.5)])
    for layout in layout_presets():
        assert len(layout.slots) >= 1


def test_ggx_ndf_peak():
    for a in (0.05, 0.2, 0.7):
        assert float(ggx_ndf(torch.tensor(1.0, dtype=torch.float64), a)) == pytest.approx(1 / (math.pi * a * a))
    peaks = [float(ggx_ndf(torch.tensor(1.0, dtype=torch.float64), a)) for a in np.linspace(0.05, 1.0, 30)]
    assert all(p > q for p, q in zip(peaks, peaks[1:]))


def test_ggx_below_horizon_zero():
    n = torch.zeros(4, 4, 3)
    n[..., 2] = 1
    p = SpecularParams(0.3, 0.05, torch.tensor([0.0, 0.3, -1.0]), torch.ones(3), 1.0)
    assert torch.all(ggx_specular(n, torch.tensor([0.0, 0.0, 1.0]), p) == 0)


def test_ggx_nonnegative_random():
    g = torch.Generator().manual_seed(0)
    n = torch.nn.functional.normalize(torch.randn(16, 16, 3, generator=g) * 0.2 + torch.tensor([0, 0, 1.0]), dim=-1)
    p = SpecularParams(0.2, 0.05, torch.tensor([0.3, 0.1, 1.0]), torch.ones(3), 2.0)
    assert torch.all(ggx_specular(n, torch.tensor([0.0, 0.1, 1.0]), p) >= 0)


def test_ggx_gradient_wrt_normals_and_light():
    g = torch.Generator().manual_seed(1)
    n = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64) + 0.1 * torch.randn(6, 6, 3, generator=g, dtype=torch.float64)
    view = torch.tensor([0.1, -0.1, 1.0], dtype=torch.float64)
    light = torch.tensor([-0.2, 0.3, 1.0], dtype=torch.float64)

    def f(normals, l, rough):
        p = SpecularParams(rough, 0.05, l, torch.ones(3, dtype=torch.float64), 1.5)
        return weighted_sum()(ggx_specular(normals, view, p))

    assert probe_gradient(f, [n, light, torch.tensor(0.3, dtype=torch.float64)]) < 1e-4


def test_pick_light_uniform_board_first_pixel():
    scene = flat_scene(8, 8)
    light, color = pick_light_from_brightest(scene)
    assert torch.allclose(light, torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64))
    assert torch.allclose(color, torch.ones(3, dtype=torch.float64))


def test_pick_light_color_normalised():
    scene = flat_scene(8, 8, radiance=0.1)
    scene.board_radiance[:, 3, 4] = torch.tensor([0.2, 0.4, 0.4], dtype=torch.float64)
    _, color = pick_light_from_brightest(scene)
    assert torch.allclose(color, torch.tensor([0.5, 1.0, 1.0], dtype=torch.float64))


def test_bound_specular_examples():
    d = torch.tensor([0.9, 0.2])
    h = torch.tensor([0.5, 0.0])
    assert bound_specular_intensity(d, h) == pytest.approx(0.2)
    assert bound_specular_intensity(torch.tensor([1.0]), torch.tensor([0.3])) == 0.0
    assert bound_specular_intensity(d, torch.zeros(2)) == math.inf


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_bound_specular_never_oversaturates(seed):
    rng = np.random.default_rng(seed)
    d = torch.tensor(rng.uniform(0, 1, 64))
    h = torch.tensor(rng.uniform(0, 1, 64) * (rng.random(64) > 0.3))
    s = bound_specular_intensity(d, h)
    if math.isfinite(s):
        assert float((d + s * h).max()) <= 1 + 1e-6


def test_gamma_examples():
    assert float(gamma_encode(torch.tensor(0.0))) == 0.0
    assert float(gamma_encode(torch.tensor(1.0))) == 1.0
    assert float(gamma_encode(torch.tensor(0.5))) == pytest.approx(0.5 ** (1 / 2.2), abs=1e-6)
    x = torch.rand(1000, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
    assert (gamma_decode(gamma_encode(x)) - x).abs().max() < 1e-6


def test_random_scene_composite_in_range():
    rng = np.random.default_rng(0)
    cfg = SceneConfig(height=64, width=64)
    for _ in range(3):
        scene = random_board_scene(rng, cfg)
        norms = torch.linalg.norm(scene.normal_map, dim=-1)
        assert (norms - 1).abs().max() < 1e-6
        s = place_markers(scene, layout_presets()[1], torch.rand(4, 8, 8, 3), [0, 1, 2, 3])
        spec = random_specular(rng, scene, s.image, cfg)
        from dfmarker.render import add_specular
        out = add_specular(s, scene, spec)
        assert float(out.image.min()) >= 0 and float(out.image.max()) <= 1 + 1e-5


def test_composite_gradient_wrt_marker_pixels():
    quad = torch.tensor([[3.0, 4.0], [28.0, 2.0], [30.0, 29.0], [2.0, 27.0]], dtype=torch.float64)
    scene = flat_scene(32, 32, quad)
    layout = LayoutConfig([(0.1, 0.1, 0.9, 0.9)])
    markers = torch.rand(1, 6, 6, 3, dtype=torch.float64)
    read = weighted_sum(2)
    assert probe_gradient(lambda m: read(place_markers(scene, layout, m, [0]).image), [markers]) < 1e-4
