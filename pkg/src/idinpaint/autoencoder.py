"""Convolutional VAE mapping images to a compact latent grid.

The encoder halves spatial resolution once per stage (downsample factor =
2 ** stages) and emits a diagonal Gaussian posterior; `encode` returns the
posterior mean, which is what the diffusion side consumes. The decoder
mirrors the encoder with nearest-neighbor upsampling and ends in tanh, so
decoded images always live in [-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import manifest as mio
from .artifacts import load_checkpoint, save_checkpoint, torch_generator
from .errors import ArgumentError, ConfigurationError, DataError, NumericalError
from .nets import freeze, norm, seeded_init


@dataclass(frozen=True)
class VAEGeometry:
    image_size: int = 64
    latent_channels: int = 4
    downsample_factor: int = 4
    base_channels: int = 32

    def __post_init__(self):
        if self.image_size < 4:
            raise ConfigurationError(f"image size must be >= 4, got {self.image_size}")
        f = self.downsample_factor
        if f < 2 or (f & (f - 1)) != 0:
            raise ConfigurationError(f"downsample factor must be a power of two >= 2, got {f}")
        if self.image_size % f != 0:
            raise ConfigurationError(
                f"image size {self.image_size} not divisible by factor {f}")
        if self.latent_channels < 1:
            raise ConfigurationError("latent_channels must be positive")

    @property
    def stages(self) -> int:
        return int(math.log2(self.downsample_factor))

    @property
    def latent_size(self) -> int:
        return self.image_size // self.downsample_factor


class ConvVAE(nn.Module):
    def __init__(self, geometry: VAEGeometry = VAEGeometry(), seed: int = 0):
        super().__init__()
        self.geometry = geometry
        ch = geometry.base_channels
        enc = [nn.Conv2d(3, ch, 3, padding=1)]
        width = ch
        for _ in range(geometry.stages):
            enc += [norm(width), nn.SiLU(), nn.Conv2d(width, width * 2, 3, stride=2, padding=1)]
            width *= 2
        enc += [norm(width), nn.SiLU(),
                nn.Conv2d(width, 2 * geometry.latent_channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)
        dec = [nn.Conv2d(geometry.latent_channels, width, 3, padding=1)]
        for _ in range(geometry.stages):
            dec += [norm(width), nn.SiLU(), nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(width, width // 2, 3, padding=1)]
            width //= 2
        dec += [norm(width), nn.SiLU(), nn.Conv2d(width, 3, 3, padding=1), nn.Tanh()]
        self.decoder = nn.Sequential(*dec)
        seeded_init(self, "vae", seed)

    @property
    def downsample_factor(self) -> int:
        return self.geometry.downsample_factor

    def _check_image(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 3:
            x = x[None]
        s = self.geometry.image_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
            raise ArgumentError(f"expected [B, 3, {s}, {s}] image batch, got {tuple(x.shape)}")
        return x

    def posterior(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self._check_image(x)
        mu, logvar = self.encoder(x).chunk(2, dim=1)
        return mu, logvar.clamp(-20.0, 10.0)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Posterior mean latent for an image (or batch); deterministic."""
        squeeze = x.ndim == 3
        mu, _ = self.posterior(x)
        return mu[0] if squeeze else mu

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Decode latents to images in [-1, 1]."""
        squeeze = z.ndim == 3
        if squeeze:
            z = z[None]
        g = self.geometry
        if z.ndim != 4 or z.shape[1] != g.latent_channels or z.shape[2] != g.latent_size \
                or z.shape[3] != g.latent_size:
            raise ArgumentError(
                f"expected [B, {g.latent_channels}, {g.latent_size}, {g.latent_size}] "
                f"latents, got {tuple(z.shape)}")
        out = self.decoder(z)
        return out[0] if squeeze else out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))


def encode(x: torch.Tensor, vae: ConvVAE) -> torch.Tensor:
    return vae.encode(x)


def decode(z: torch.Tensor, vae: ConvVAE) -> torch.Tensor:
    return vae.decode(z)


@dataclass(frozen=True)
class VAETrainConfig:
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 1e-3
    kl_weight: float = 1e-6
    seed: int = 0
    val_fraction: float = 0.1
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigurationError("steps and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigurationError("val_fraction must be in [0, 1)")


def load_corpus_images(manifest_path: str | Path, image_size: int) -> tuple[torch.Tensor, list[str]]:
    rows = mio.read_manifest(manifest_path)
    images, identities = [], []
    for row in rows:
        if "image_path" not in row:
            raise DataError(f"manifest row missing image_path: {row}")
        images.append(mio.load_image(mio.resolve(manifest_path, row["image_path"]), image_size))
        identities.append(str(row.get("identity_id", "")))
    return torch.stack(images), identities


def train_autoencoder(manifest_path: str | Path, config: VAETrainConfig = VAETrainConfig(),
                      geometry: VAEGeometry = VAEGeometry()) -> tuple[ConvVAE, list[dict]]:
    """Train a VAE on a corpus manifest; returns the model and loss history.

    Loss is reconstruction MSE plus a small KL term against the unit
    Gaussian. All randomness (init, batch order, posterior noise) derives
    from config.seed, so two runs with the same inputs match exactly.
    """
    images, _ = load_corpus_images(manifest_path, geometry.image_size)
    n_val = int(round(len(images) * config.val_fraction))
    perm = torch.randperm(len(images), generator=torch_generator("vae-split", config.seed))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:
        raise DataError("no training images left after validation split")
    train_images, val_images = images[train_idx], images[val_idx]

    vae = ConvVAE(geometry, seed=config.seed)
    opt = torch.optim.Adam(vae.parameters(), lr=config.learning_rate)
    history = []
    for step in range(1, config.steps + 1):
        g = torch_generator("vae-step", config.seed, step)
        idx = torch.randint(0, len(train_images), (config.batch_size,), generator=g)
        batch = train_images[idx]
        mu, logvar = vae.posterior(batch)
        noise = torch.randn(mu.shape, generator=g)
        z = mu + torch.exp(0.5 * logvar) * noise
        recon = decode(z, vae)
        rec_loss = F.mse_loss(recon, batch)
        kl = 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).mean()
        loss = rec_loss + config.kl_weight * kl
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite VAE loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.log_every == 0 or step == config.steps:
            entry = {"step": step, "loss": float(loss.detach()),
                     "recon": float(rec_loss.detach()), "kl": float(kl.detach())}
            if len(val_images):
                with torch.no_grad():
                    vrec = vae(val_images)
                    entry["val_mae"] = float((vrec - val_images).abs().mean())
            history.append(entry)
    freeze(vae)
    return vae, history


def reconstruction_mae(vae: ConvVAE, images: torch.Tensor) -> float:
    with torch.no_grad():
        return float((vae(images) - images).abs().mean())


def save_vae(vae: ConvVAE, path: str | Path, extra: dict | None = None) -> Path:
    geometry = {
        "image_size": vae.geometry.image_size,
        "latent_channels": vae.geometry.latent_channels,
        "downsample_factor": vae.geometry.downsample_factor,
        "base_channels": vae.geometry.base_channels,
    }
    save_checkpoint(path, "vae", vae.state_dict(), geometry, extra or {})
    return Path(path)


def load_vae(path: str | Path) -> ConvVAE:
    blob = load_checkpoint(path, "vae")
    vae = ConvVAE(VAEGeometry(**blob["geometry"]))
    vae.load_state_dict(blob["state_dict"])
    return freeze(vae)
