import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from crossart.errors import InvalidDimensionError, NonFiniteInputError, ShapeError
from crossart.stats import art_bn, instance_norm, spatial_stats, token_art_bn, token_instance_norm


def hand_stats(x):
    """Direct double loop over (n, c) with population variance."""
    n, c, h, w = x.shape
    mu = torch.zeros(n, c, dtype=torch.float64)
    sig = torch.zeros(n, c, dtype=torch.float64)
    for i in range(n):
        for j in range(c):
            vals = [float(v) for v in x[i, j].reshape(-1)]
            m = sum(vals) / len(vals)
            var = sum((v - m) ** 2 for v in vals) / len(vals)
            mu[i, j], sig[i, j] = m, math.sqrt(var + 1e-5)
    return mu, sig


def test_spatial_stats_hand_example():
    x = torch.tensor([[[[1.0, 3.0], [5.0, 7.0]]]], dtype=torch.float64)
    mu, sigma, _ = spatial_stats(x, 1e-5)
    assert mu.item() == pytest.approx(4.0)
    assert sigma.item() == pytest.approx(math.sqrt(5 + 1e-5))
    assert sigma.item() == pytest.approx(2.23607, abs=1e-5)


def test_spatial_stats_constant_and_translation():
    x = torch.full((1, 2, 3, 3), 2.5, dtype=torch.float64)
    mu, sigma, _ = spatial_stats(x, 1e-5)
    assert torch.all(mu == 2.5)
    assert torch.allclose(sigma, torch.full_like(sigma, math.sqrt(1e-5)))

    a = torch.randn(1, 3, 4, 5, dtype=torch.float64)
    mu, sigma, _ = spatial_stats(torch.cat([a, a + 10]))
    assert torch.allclose(mu[1] - mu[0], torch.full((3,), 10.0, dtype=torch.float64))
    assert torch.allclose(sigma[1], sigma[0])


def test_spatial_stats_matches_loop_oracle():
    x = torch.randn(2, 3, 4, 6, dtype=torch.float64)
    mu, sigma, _ = spatial_stats(x)
    mu_o, sig_o = hand_stats(x)
    assert torch.allclose(mu, mu_o, atol=1e-12)
    assert torch.allclose(sigma, sig_o, atol=1e-12)


def test_spatial_stats_errors():
    with pytest.raises(InvalidDimensionError):
        spatial_stats(torch.zeros(1, 1, 0, 3))
    with pytest.raises(NonFiniteInputError):
        spatial_stats(torch.tensor([[[[1.0, float("nan")]]]]))
    with pytest.raises(ShapeError):
        spatial_stats(torch.zeros(3, 3))


def test_instance_norm_example():
    x = torch.tensor([[[[1.0, 3.0], [5.0, 7.0]]]], dtype=torch.float64)
    want = torch.tensor([[-1.3416, -0.4472], [0.4472, 1.3416]], dtype=torch.float64)
    assert torch.allclose(instance_norm(x)[0, 0], want, atol=1e-3)


def test_instance_norm_constant_and_idempotent():
    assert torch.all(instance_norm(torch.full((1, 2, 3, 3), -4.0)) == 0)
    x = torch.randn(2, 4, 5, 5, dtype=torch.float64)
    once = instance_norm(x)
    assert torch.allclose(instance_norm(once), once, atol=1e-3)
    mu, sigma, _ = spatial_stats(once)
    assert mu.abs().max() <= 1e-5
    assert (sigma - 1).abs().max() <= 1e-3


def test_art_bn_self_and_constant():
    x = torch.randn(2, 3, 6, 6, dtype=torch.float64)
    assert torch.allclose(art_bn(x, x), x, atol=1e-3)
    y = torch.randn(2, 3, 4, 7, dtype=torch.float64)
    out = art_bn(torch.full((2, 3, 6, 6), 9.0, dtype=torch.float64), y)
    mu_y = spatial_stats(y).mu
    assert torch.allclose(out, mu_y[..., None, None].expand_as(out))


def test_art_bn_channel_mismatch():
    with pytest.raises(ShapeError):
        art_bn(torch.zeros(1, 3, 2, 2), torch.zeros(1, 4, 2, 2))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), h=st.integers(2, 8), w=st.integers(2, 8), hy=st.integers(2, 8))
def test_art_bn_transfers_statistics(seed, h, w, hy):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 3, h, w, generator=g, dtype=torch.float64) * 3 + 1
    y = torch.randn(2, 3, hy, 5, generator=g, dtype=torch.float64) * 0.5 - 2
    out = art_bn(x, y)
    assert out.shape == x.shape
    assert torch.isfinite(out).all()
    sx, sy = spatial_stats(out), spatial_stats(y)
    assert torch.allclose(sx.mu, sy.mu, atol=1e-4)
    assert torch.allclose(sx.sigma, sy.sigma, atol=1e-4)


def test_determinism_bit_identical():
    x = torch.randn(2, 3, 5, 5)
    y = torch.randn(2, 3, 4, 4)
    assert torch.equal(art_bn(x, y), art_bn(x, y))


def test_finite_closure_small_epsilon():
    x = torch.full((1, 1, 3, 3), 1e6, dtype=torch.float64)
    assert torch.isfinite(instance_norm(x, 1e-8)).all()


def test_token_views_use_features_as_channels():
    m = torch.randn(7, 4, dtype=torch.float64)
    out = token_instance_norm(m)
    assert out.shape == m.shape
    assert torch.allclose(out.mean(0), torch.zeros(4, dtype=torch.float64), atol=1e-12)
    ref = torch.randn(3, 7, 4, dtype=torch.float64) * 2 + 5
    moved = token_art_bn(torch.randn(3, 9, 4, dtype=torch.float64), ref)
    assert torch.allclose(moved.mean(1), ref.mean(1), atol=1e-10)
