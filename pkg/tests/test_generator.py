import pytest
import torch
from hypothesis import given, settings, strategies as st

from _grad import probe_gradient, weighted_sum
from dfmarker.codec import sample_messages
from dfmarker.generator import GeneratorConfig, MarkerGenerator, adain, generate, pixel_norm

NORMS = ["none", "pixel_norm", "adain_zero_pad", "adain_replicate"]


def test_batch_shape_and_range():
    torch.manual_seed(0)
    g = MarkerGenerator()
    out = generate(sample_messages(96, 0, 36), g)
    assert out.shape == (96, 32, 32, 3)
    assert out.min() >= 0 and out.max() <= 1


def test_duplicate_messages_identical():
    g = MarkerGenerator()
    m = sample_messages(3, 1, 36)
    out = generate([m[0], m[1], m[0]], g)
    assert torch.equal(out[0], out[2])


def test_architecture_shapes():
    g = MarkerGenerator()
    f = g.features(torch.zeros(2, 36))
    assert f["reshape"].shape == (2, 16, 4, 4)
    assert f["block1"].shape == (2, 8, 8, 8)
    assert f["block2"].shape == (2, 6, 16, 16)
    assert f["block3"].shape == (2, 6, 32, 32)
    assert f["rgb"].shape == (2, 3, 32, 32)


def test_wrong_message_length():
    with pytest.raises(ValueError):
        MarkerGenerator()(torch.zeros(2, 35))


def test_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(marker_resolution=30)
    with pytest.raises(ValueError):
        GeneratorConfig(normalization="batch")


@pytest.mark.parametrize("norm", NORMS)
def test_normalization_variants_shape_and_range(norm):
    torch.manual_seed(1)
    g = MarkerGenerator(GeneratorConfig(normalization=norm, init_std=0.5))
    out = g(torch.randint(0, 2, (4, 36)).float())
    assert out.shape == (4, 32, 32, 3)
    assert 0 <= out.min() and out.max() <= 1


def test_adain_identity_style():
    x = torch.randn(3, 5, 6, 4, dtype=torch.float64) * 3 + 2
    style = torch.cat([torch.ones(3, 4), torch.zeros(3, 4)], 1).double()
    y = adain(x, style)
    assert torch.allclose(y.mean((1, 2)), torch.zeros(3, 4, dtype=torch.float64), atol=1e-6)
    assert torch.allclose(y.var((1, 2), unbiased=False), torch.ones(3, 4, dtype=torch.float64), atol=1e-6)


def test_adain_constant_channel_gives_bias():
    x = torch.full((1, 4, 4, 2), 7.0, dtype=torch.float64)
    style = torch.tensor([[2.0, 2.0, 0.3, -1.0]], dtype=torch.float64)
    y = adain(x, style)
    assert torch.allclose(y[..., 0], torch.full((1, 4, 4), 0.3, dtype=torch.float64))
    assert torch.allclose(y[..., 1], torch.full((1, 4, 4), -1.0, dtype=torch.float64))


def test_adain_affine_law():
    x = torch.randn(2, 8, 8, 3, dtype=torch.float64)
    style = torch.tensor([[2.0] * 3 + [3.0] * 3] * 2, dtype=torch.float64)
    y = adain(x, style)
    assert torch.allclose(y.mean((1, 2)), torch.full((2, 3), 3.0, dtype=torch.float64), atol=1e-6)
    assert torch.allclose(y.std((1, 2), unbiased=False), torch.full((2, 3), 2.0, dtype=torch.float64), atol=1e-6)


def test_adain_channel_mismatch():
    with pytest.raises(ValueError):
        adain(torch.zeros(1, 2, 2, 3), torch.zeros(1, 4))


def test_pixel_norm_examples():
    assert torch.allclose(pixel_norm(torch.tensor([[-1.0]])).abs(), torch.ones(1, 1))
    assert torch.equal(pixel_norm(torch.zeros(2, 5)), torch.zeros(2, 5))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_pixel_norm_scale_invariant(k, seed):
    x = torch.randn(3, 16, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    assert torch.allclose(pixel_norm(k * x, eps=0.0), pixel_norm(x, eps=0.0), atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(NORMS))
def test_output_range_any_weights(seed, norm):
    torch.manual_seed(seed)
    g = MarkerGenerator(GeneratorConfig(normalization=norm, init_std=2.0))
    out = g(torch.randint(0, 2, (2, 36)).float())
    assert 0 <= out.min() and out.max() <= 1


def test_gradient_wrt_weights_and_bits():
    torch.manual_seed(0)
    g = MarkerGenerator(GeneratorConfig(init_std=0.3)).double()
    read = weighted_sum(1)
    bits = torch.rand(2, 36, dtype=torch.float64)

    def f(weight, style_weight, b):
        params = {"fc1.weight": weight, "fc2.weight": style_weight}
        return read(torch.func.functional_call(g, params, (b,)))

    assert probe_gradient(f, [g.fc1.weight, g.fc2.weight, bits]) < 1e-4
