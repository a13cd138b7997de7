"""Schedule, forward/reverse diffusion, and sampler tests.

The closed-form operations are checked against scalar-loop oracles in
float64, plus Monte Carlo moment checks for the forward corruption.
"""

from __future__ import annotations

import math

import pytest
import torch

from idinpaint.diffusion import (
    forward_diffuse,
    make_schedule,
    mask_to_latent,
    predict_x0,
    reverse_step,
    sample_inpaint,
    sample_latent,
)
from idinpaint.errors import ArgumentError, ConfigurationError, NumericalError

from oracles import forward_diffuse_oracle, reverse_mean_oracle


def test_schedule_tables_match_loop_oracle():
    sched = make_schedule(50, 1e-4, 0.02)
    betas = sched.betas.tolist()
    assert betas[0] == pytest.approx(1e-4, abs=1e-15)
    assert betas[-1] == pytest.approx(0.02, abs=1e-15)
    abar = 1.0
    for t in range(1, 51):
        abar *= 1.0 - betas[t - 1]
        assert float(sched.alpha_bar(t)) == pytest.approx(abar, abs=1e-12)


def test_schedule_is_monotone():
    sched = make_schedule(100)
    assert torch.all(sched.betas[1:] >= sched.betas[:-1])
    assert torch.all(sched.alpha_bars[1:] < sched.alpha_bars[:-1])
    assert 0.0 < float(sched.alpha_bars[-1]) < 1.0


@pytest.mark.parametrize("bad", [0, -3, 2.5])
def test_schedule_rejects_bad_steps(bad):
    with pytest.raises(ConfigurationError):
        make_schedule(bad)


@pytest.mark.parametrize("start,end", [(0.0, 0.02), (0.03, 0.02), (1e-4, 1.0)])
def test_schedule_rejects_bad_betas(start, end):
    with pytest.raises(ConfigurationError):
        make_schedule(10, start, end)


def test_timestep_bounds_checked():
    sched = make_schedule(10)
    with pytest.raises(ArgumentError):
        sched.alpha_bar(0)
    with pytest.raises(ArgumentError):
        sched.beta(11)


def test_forward_diffuse_matches_oracle():
    sched = make_schedule(40, 1e-3, 0.05)
    g = torch.Generator().manual_seed(0)
    for t in (1, 7, 40):
        z0 = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
        eps = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
        got = forward_diffuse(z0, t, eps, sched).numpy()
        want = forward_diffuse_oracle(z0.numpy(), t, eps.numpy(), sched.betas.tolist())
        assert abs(got - want).max() < 1e-12


def test_forward_diffuse_per_sample_timesteps():
    sched = make_schedule(20)
    g = torch.Generator().manual_seed(1)
    z0 = torch.randn(3, 2, 4, 4, generator=g)
    eps = torch.randn(3, 2, 4, 4, generator=g)
    t = torch.tensor([1, 10, 20])
    batched = forward_diffuse(z0, t, eps, sched)
    for i in range(3):
        single = forward_diffuse(z0[i], int(t[i]), eps[i], sched)
        assert torch.equal(batched[i], single)


def test_forward_diffuse_shape_mismatch():
    sched = make_schedule(5)
    with pytest.raises(ArgumentError):
        forward_diffuse(torch.zeros(1, 2, 2), 1, torch.zeros(2, 2, 2), sched)
    with pytest.raises(ArgumentError):
        forward_diffuse(torch.zeros(2, 2), torch.tensor([1, 2]), torch.zeros(2, 2), sched)


def test_predict_x0_inverts_forward_diffuse():
    """Round-trip recovery of z0 across the whole schedule.

    Run in float64: the inversion divides by sqrt(abar_t), which at late
    timesteps amplifies representation rounding far past 1e-6 in float32,
    so single precision cannot witness the algebraic identity.
    """
    sched = make_schedule(1000)
    g = torch.Generator().manual_seed(2)
    for t in (1, 250, 500, 999, 1000):
        z0 = torch.randn(4, 4, 8, 8, generator=g, dtype=torch.float64)
        eps = torch.randn(4, 4, 8, 8, generator=g, dtype=torch.float64)
        zt = forward_diffuse(z0, t, eps, sched)
        back = predict_x0(zt, eps, t, sched)
        err = (back - z0).abs().max() / z0.abs().max()
        assert float(err) < 1e-6


def test_predict_x0_guards_vanishing_alpha_bar():
    sched = make_schedule(400, 0.05, 0.2)
    assert float(sched.alpha_bars[-1]) <= 1e-8
    with pytest.raises(NumericalError):
        predict_x0(torch.zeros(1, 2, 2), torch.zeros(1, 2, 2), 400, sched)


def test_forward_diffuse_moments_monte_carlo():
    """Sample mean and variance of z_t sit within 3 standard errors."""
    sched = make_schedule(100)
    n = 10_000
    g = torch.Generator().manual_seed(3)
    z0 = torch.full((n, 1, 1, 1), 1.5)
    for t in (1, 50, 100):
        eps = torch.randn(n, 1, 1, 1, generator=g)
        zt = forward_diffuse(z0, t, eps, sched).ravel().double()
        abar = float(sched.alpha_bar(t))
        mean_want = math.sqrt(abar) * 1.5
        var_want = 1.0 - abar
        se_mean = math.sqrt(var_want / n)
        se_var = var_want * math.sqrt(2.0 / (n - 1))
        assert abs(float(zt.mean()) - mean_want) < 3 * se_mean
        assert abs(float(zt.var(unbiased=True)) - var_want) < 3 * se_var


def test_reverse_step_mean_matches_oracle():
    sched = make_schedule(30, 1e-3, 0.04)
    g = torch.Generator().manual_seed(4)
    zt = torch.randn(2, 2, 3, 3, generator=g, dtype=torch.float64)
    eps_hat = torch.randn(2, 2, 3, 3, generator=g, dtype=torch.float64)
    for t in (1, 15, 30):
        got = reverse_step(zt, eps_hat, t, sched, torch.zeros_like(zt)).numpy()
        want = reverse_mean_oracle(zt.numpy(), eps_hat.numpy(), t, sched.betas.tolist())
        assert abs(got - want).max() < 1e-12


def test_reverse_step_noise_scale():
    sched = make_schedule(30)
    zt = torch.zeros(1, 2, 2)
    eps_hat = torch.zeros(1, 2, 2)
    noise = torch.ones(1, 2, 2)
    t = 10
    with_noise = reverse_step(zt, eps_hat, t, sched, noise)
    without = reverse_step(zt, eps_hat, t, sched, torch.zeros_like(noise))
    sigma = math.sqrt(float(sched.beta(t)))
    assert torch.allclose(with_noise - without, torch.full_like(zt, sigma), atol=1e-7)


def test_reverse_step_final_step_is_deterministic():
    sched = make_schedule(30)
    g = torch.Generator().manual_seed(5)
    zt = torch.randn(1, 2, 2, generator=g)
    eps_hat = torch.randn(1, 2, 2, generator=g)
    a = reverse_step(zt, eps_hat, 1, sched, torch.randn(1, 2, 2, generator=g))
    b = reverse_step(zt, eps_hat, 1, sched, torch.randn(1, 2, 2, generator=g))
    assert torch.equal(a, b)


def test_reverse_step_rejects_tensor_timestep():
    sched = make_schedule(5)
    z = torch.zeros(1, 2, 2)
    with pytest.raises(ArgumentError):
        reverse_step(z, z, torch.tensor(3), sched, z)


def test_mask_to_latent_any_pixel_rule():
    mask = torch.zeros(16, 16)
    mask[5, 9] = 1.0
    lat = mask_to_latent(mask, 4)
    assert lat.shape == (4, 4)
    assert lat[1, 2] == 1.0
    assert float(lat.sum()) == 1.0


def test_mask_to_latent_shapes_and_errors():
    assert mask_to_latent(torch.zeros(8, 8), 4).shape == (2, 2)
    assert mask_to_latent(torch.zeros(1, 8, 8), 4).shape == (1, 2, 2)
    assert mask_to_latent(torch.zeros(2, 1, 8, 8), 4).shape == (2, 1, 2, 2)
    with pytest.raises(ArgumentError):
        mask_to_latent(torch.zeros(9, 9), 4)
    with pytest.raises(ArgumentError):
        mask_to_latent(torch.zeros(2, 2, 1, 8, 8), 4)


def _zero_denoiser(zt, t, mask_lat, z_cond, e_cond):
    return torch.zeros_like(zt)


def test_sample_latent_seed_determinism():
    sched = make_schedule(8)
    z_cond = torch.zeros(2, 4, 8, 8)
    mask_lat = torch.ones(2, 1, 8, 8)
    e = torch.zeros(2, 64)
    a = sample_latent(_zero_denoiser, mask_lat, z_cond, e, sched, seed=7)
    b = sample_latent(_zero_denoiser, mask_lat, z_cond, e, sched, seed=7)
    c = sample_latent(_zero_denoiser, mask_lat, z_cond, e, sched, seed=8)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_sample_latent_rejects_bad_denoiser_shape():
    sched = make_schedule(3)

    def bad(zt, t, mask_lat, z_cond, e_cond):
        return zt[..., :1]

    with pytest.raises(ArgumentError):
        sample_latent(bad, torch.ones(1, 1, 4, 4), torch.zeros(1, 4, 4, 4),
                      torch.zeros(1, 64), sched, seed=0)


class _StubVAE:
    """Pixel-space stand-in: encode is average pooling, decode is upsampling."""

    downsample_factor = 4

    def encode(self, x):
        return torch.nn.functional.avg_pool2d(x, 4)

    def decode(self, z):
        return torch.nn.functional.interpolate(z, scale_factor=4, mode="nearest")


def test_sample_inpaint_preserves_unmasked_pixels_bitwise():
    sched = make_schedule(6)
    g = torch.Generator().manual_seed(9)
    image = torch.rand(3, 16, 16, generator=g) * 2.0 - 1.0
    mask = torch.zeros(16, 16)
    mask[4:9, 6:12] = 1.0
    out = sample_inpaint(_zero_denoiser, image, mask, torch.zeros(1, 64),
                         _StubVAE(), sched, seed=1)
    assert out.shape == image.shape
    keep = mask < 0.5
    assert torch.equal(out[:, keep], image[:, keep])
    assert not torch.equal(out[:, ~keep], image[:, ~keep])


def test_sample_inpaint_empty_mask_returns_input():
    sched = make_schedule(4)
    image = torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(10)) * 2 - 1
    out = sample_inpaint(_zero_denoiser, image, torch.zeros(16, 16),
                         torch.zeros(1, 64), _StubVAE(), sched, seed=2)
    assert torch.equal(out, image)


def test_sample_inpaint_batched_and_mask_shapes():
    sched = make_schedule(4)
    g = torch.Generator().manual_seed(11)
    images = torch.rand(2, 3, 16, 16, generator=g) * 2 - 1
    masks = torch.zeros(2, 1, 16, 16)
    masks[:, :, :4] = 1.0
    out = sample_inpaint(_zero_denoiser, images, masks, torch.zeros(2, 64),
                         _StubVAE(), sched, seed=3)
    assert out.shape == images.shape
    with pytest.raises(ArgumentError):
        sample_inpaint(_zero_denoiser, images, torch.zeros(3, 1, 16, 16),
                       torch.zeros(2, 64), _StubVAE(), sched, seed=3)
