"""Closed-form forward diffusion, reverse stepping, and the masked inpainting sampler.

All operations work in the latent space of the autoencoder and are pure
given their inputs: noise is always supplied by the caller or derived from
an explicit seed, never drawn from global RNG state.

Conventions:
- A latent is a real tensor [C, H, W] (or [B, C, H, W] for batched calls).
- Timesteps are 1-based: t in [1, T]. Internally beta/alpha_bar tables are
  0-indexed, so table index = t - 1.
- The forward corruption is z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps
  with abar_t the cumulative product of (1 - beta_s) up to t.
- The reverse step uses the ancestral mean
  mu = (z_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(1 - beta_t)
  with variance sigma_t^2 = beta_t and no noise added at t = 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .artifacts import torch_generator
from .errors import ArgumentError, ConfigurationError, NumericalError

# Denoiser contract used by the sampler: (z_t, t, latent_mask, z_cond, e_cond) -> eps_hat
Denoiser = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances beta_t and their cumulative products abar_t.

    Tables are stored in float64 so the product invariant
    abar_t = prod_{s<=t} (1 - beta_s) holds to 1e-12; values are cast to the
    dtype of the latents at use sites.
    """

    steps: int
    betas: torch.Tensor       # float64 [T]
    alpha_bars: torch.Tensor  # float64 [T]

    def beta(self, t: int | torch.Tensor) -> torch.Tensor:
        return self.betas[self._index(t)]

    def alpha_bar(self, t: int | torch.Tensor) -> torch.Tensor:
        return self.alpha_bars[self._index(t)]

    def _index(self, t: int | torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if torch.any(t < 1) or torch.any(t > self.steps):
            raise ArgumentError(f"timestep out of range [1, {self.steps}]: {t}")
        return t - 1


def make_schedule(steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule from beta_start to beta_end over `steps` steps.

    Degenerate single-step schedules (steps=1) are supported; they are used
    by the algebraic oracle tests.
    """
    if not isinstance(steps, int) or steps < 1:
        raise ConfigurationError(f"schedule needs an integer step count >= 1, got {steps!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if steps == 1:
        betas = torch.tensor([beta_start], dtype=torch.float64)
    else:
        betas = torch.linspace(beta_start, beta_end, steps, dtype=torch.float64)
    alpha_bars = torch.cumprod(1.0 - betas, dim=0)
    return NoiseSchedule(steps=steps, betas=betas, alpha_bars=alpha_bars)


def _expand(values: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Broadcast per-timestep scalars against a latent tensor.

    A 0-dim value applies to the whole tensor; a 1-dim value of length B
    applies per batch element of a [B, C, H, W] tensor.
    """
    values = values.to(dtype=like.dtype)
    if values.ndim == 0:
        return values
    if like.ndim != values.ndim + 3:
        raise ArgumentError(
            f"per-sample timesteps of shape {tuple(values.shape)} need a batched "
            f"latent, got shape {tuple(like.shape)}")
    return values.view(-1, *([1] * (like.ndim - 1)))


def forward_diffuse(z0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor,
                    sched: NoiseSchedule) -> torch.Tensor:
    """Jump directly to timestep t: sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps."""
    if eps.shape != z0.shape:
        raise ArgumentError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    abar = _expand(sched.alpha_bar(t), z0)
    return torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps


def predict_x0(zt: torch.Tensor, eps_hat: torch.Tensor, t: int | torch.Tensor,
               sched: NoiseSchedule) -> torch.Tensor:
    """Invert the forward jump given a noise estimate: (z_t - sqrt(1-abar)*eps_hat) / sqrt(abar)."""
    if eps_hat.shape != zt.shape:
        raise ArgumentError(f"eps_hat shape {tuple(eps_hat.shape)} != zt shape {tuple(zt.shape)}")
    abar = sched.alpha_bar(t)
    if torch.any(abar <= 1e-8):
        raise NumericalError(f"alpha_bar at t={t} is <= 1e-8; x0 reconstruction is ill-posed")
    abar = _expand(abar, zt)
    return (zt - torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(abar)


def reverse_step(zt: torch.Tensor, eps_hat: torch.Tensor, t: int, sched: NoiseSchedule,
                 noise: torch.Tensor) -> torch.Tensor:
    """One ancestral step from z_t to z_{t-1}.

    The caller supplies the Gaussian noise; it is ignored at t = 1 so the
    final step is deterministic.
    """
    if not isinstance(t, int):
        raise ArgumentError("reverse_step takes a scalar integer timestep")
    if eps_hat.shape != zt.shape or noise.shape != zt.shape:
        raise ArgumentError("zt, eps_hat and noise must share one shape")
    beta = _expand(sched.beta(t), zt)
    abar = _expand(sched.alpha_bar(t), zt)
    mean = (zt - beta / torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(1.0 - beta)
    if t == 1:
        return mean
    return mean + torch.sqrt(beta) * noise


def mask_to_latent(mask: torch.Tensor, factor: int) -> torch.Tensor:
    """Downsample a pixel mask to latent resolution.

    A latent cell counts as hole if any pixel it covers is hole, so no
    occluded pixel ever leaks into the conditioning as "known".
    """
    if mask.ndim == 2:
        mask = mask[None, None]
        squeeze = 2
    elif mask.ndim == 3:
        mask = mask[None]
        squeeze = 1
    elif mask.ndim == 4:
        squeeze = 0
    else:
        raise ArgumentError(f"mask must be [H,W], [1,H,W] or [B,1,H,W], got {tuple(mask.shape)}")
    h, w = mask.shape[-2:]
    if h % factor or w % factor:
        raise ArgumentError(f"mask size {h}x{w} not divisible by factor {factor}")
    out = torch.nn.functional.max_pool2d(mask.float(), kernel_size=factor)
    for _ in range(squeeze):
        out = out.squeeze(0)
    return out


def sample_latent(denoiser: Denoiser, mask_lat: torch.Tensor, z_cond: torch.Tensor,
                  e_cond: torch.Tensor, sched: NoiseSchedule, seed: int) -> torch.Tensor:
    """Run the full reverse chain from pure noise, conditioned on mask and context.

    Deterministic for a fixed seed: the initial draw and every step's noise
    come from one explicitly seeded generator.
    """
    g = torch_generator("sample", seed)
    zt = torch.randn(z_cond.shape, generator=g, dtype=z_cond.dtype)
    for t in range(sched.steps, 0, -1):
        t_vec = torch.full((z_cond.shape[0],), t, dtype=torch.long) if z_cond.ndim == 4 else t
        eps_hat = denoiser(zt, t_vec, mask_lat, z_cond, e_cond)
        if eps_hat.shape != zt.shape:
            raise ArgumentError(
                f"denoiser returned shape {tuple(eps_hat.shape)}, expected {tuple(zt.shape)}")
        noise = torch.randn(zt.shape, generator=g, dtype=zt.dtype)
        zt = reverse_step(zt, eps_hat, t, sched, noise)
    return zt


def sample_inpaint(denoiser: Denoiser, image: torch.Tensor, mask: torch.Tensor,
                   e_cond: torch.Tensor, vae, sched: NoiseSchedule, seed: int) -> torch.Tensor:
    """Inpaint the masked region of an image and composite with the original.

    The masked image is encoded as conditioning context, the reverse chain
    generates a latent, and after decoding the output is composited as
    mask * generated + (1 - mask) * original at pixel level, so pixels
    outside the mask are returned bit-exactly.
    """
    single = image.ndim == 3
    if single:
        image = image[None]
    if mask.ndim == 2:
        mask = mask[None]
    if mask.ndim == 3:
        mask = mask[:, None] if mask.shape[0] == image.shape[0] else mask[None]
    if mask.shape[0] != image.shape[0] or mask.shape[-2:] != image.shape[-2:]:
        raise ArgumentError(
            f"mask shape {tuple(mask.shape)} incompatible with image {tuple(image.shape)}")
    mask = (mask > 0.5).to(image.dtype)
    masked = image * (1.0 - mask)
    z_cond = vae.encode(masked)
    mask_lat = mask_to_latent(mask, vae.downsample_factor)
    z0 = sample_latent(denoiser, mask_lat, z_cond, e_cond, sched, seed)
    decoded = vae.decode(z0)
    out = torch.where(mask > 0.5, decoded, image)
    return out[0] if single else out
