"""Identity-conditioned control branch over a frozen inpainting backbone.

The backbone is a small U-Net denoiser over latents, conditioned on the
latent hole mask and the encoded masked image. The control branch maps an
identity embedding to a tiny spatial seed (1/8 of the latent edge),
upsamples it through three conv blocks to one feature map per decoder
level, and injects each map additively through a 1x1 convolution whose
weights start at exactly zero. With the projections at zero the branch is
invisible: conditioned and unconditioned outputs are bit-identical.
Injection happens only on the decoder path; encoder features are never
touched.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .artifacts import load_checkpoint, save_checkpoint
from .errors import ArgumentError, ConfigurationError, NumericalError
from .nets import (Downsample, ResBlock, TimeMLP, Upsample, ZeroConv2d, freeze, norm,
                   seeded_init, timestep_embedding)

SEED_RATIO = 8
N_LEVELS = 3


@dataclass(frozen=True)
class BackboneGeometry:
    latent_channels: int = 4
    latent_size: int = 16
    base_channels: int = 32
    time_dim: int = 128

    def __post_init__(self):
        if self.latent_size % SEED_RATIO != 0:
            raise ConfigurationError(
                f"latent size must be divisible by {SEED_RATIO}, got {self.latent_size}")
        if min(self.latent_channels, self.base_channels, self.time_dim) < 1:
            raise ConfigurationError("backbone dimensions must be positive")

    @property
    def level_channels(self) -> tuple[int, int, int]:
        b = self.base_channels
        return (4 * b, 2 * b, b)

    @property
    def level_sizes(self) -> tuple[int, int, int]:
        s = self.latent_size
        return (s // 4, s // 2, s)

    @property
    def injection_specs(self) -> tuple[tuple[int, int], ...]:
        """(channels, spatial size) for each decoder-level injection site."""
        return tuple(zip(self.level_channels, self.level_sizes))


class BackboneDenoiser(nn.Module):
    """U-Net noise predictor for masked latent inpainting.

    Inputs are the noisy latent, the latent hole mask and the latent of the
    masked image, concatenated channelwise. `control`, when given, must
    hold one additive tensor per decoder level, already projected to the
    level's channel width.
    """

    def __init__(self, geometry: BackboneGeometry = BackboneGeometry(), seed: int = 0):
        super().__init__()
        self.geometry = geometry
        b = geometry.base_channels
        td = geometry.time_dim
        cin = 2 * geometry.latent_channels + 1
        self.time_mlp = TimeMLP(td, td)
        self.in_conv = nn.Conv2d(cin, b, 3, padding=1)
        self.enc1 = ResBlock(b, b, td)
        self.down1 = Downsample(b, 2 * b)
        self.enc2 = ResBlock(2 * b, 2 * b, td)
        self.down2 = Downsample(2 * b, 4 * b)
        self.mid = ResBlock(4 * b, 4 * b, td)
        self.dec0 = ResBlock(4 * b, 4 * b, td)
        self.up1 = Upsample(4 * b, 2 * b)
        self.dec1 = ResBlock(4 * b, 2 * b, td)
        self.up2 = Upsample(2 * b, b)
        self.dec2 = ResBlock(2 * b, b, td)
        self.out_norm = norm(b)
        self.out_conv = nn.Conv2d(b, geometry.latent_channels, 3, padding=1)
        seeded_init(self, "backbone", seed)

    def _check_inputs(self, zt, mask_lat, z_cond, control):
        g = self.geometry
        want = (g.latent_channels, g.latent_size, g.latent_size)
        if zt.ndim != 4 or tuple(zt.shape[1:]) != want:
            raise ArgumentError(f"zt must be [B, {want[0]}, {want[1]}, {want[2]}], "
                                f"got {tuple(zt.shape)}")
        if z_cond.shape != zt.shape:
            raise ArgumentError(f"z_cond shape {tuple(z_cond.shape)} != zt {tuple(zt.shape)}")
        if mask_lat.shape != (zt.shape[0], 1, g.latent_size, g.latent_size):
            raise ArgumentError(f"mask_lat must be [B, 1, {g.latent_size}, "
                                f"{g.latent_size}], got {tuple(mask_lat.shape)}")
        if control is not None:
            if len(control) != N_LEVELS:
                raise ArgumentError(f"expected {N_LEVELS} control tensors, got {len(control)}")
            for lvl, (c, (ch, size)) in enumerate(zip(control, self.geometry.injection_specs)):
                want_c = (zt.shape[0], ch, size, size)
                if tuple(c.shape) != want_c:
                    raise ArgumentError(
                        f"control map {lvl} has shape {tuple(c.shape)}, expected {want_c}")

    def forward(self, zt: torch.Tensor, t: torch.Tensor, mask_lat: torch.Tensor,
                z_cond: torch.Tensor, control: list[torch.Tensor] | None = None
                ) -> torch.Tensor:
        self._check_inputs(zt, mask_lat, z_cond, control)
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(zt.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.geometry.time_dim))
        x = self.in_conv(torch.cat([zt, mask_lat, z_cond], dim=1))
        h1 = self.enc1(x, temb)
        h2 = self.enc2(self.down1(h1), temb)
        x = self.mid(self.down2(h2), temb)
        x = self.dec0(x, temb)
        if control is not None:
            x = x + control[0]
        x = self.dec1(torch.cat([self.up1(x), h2], dim=1), temb)
        if control is not None:
            x = x + control[1]
        x = self.dec2(torch.cat([self.up2(x), h1], dim=1), temb)
        if control is not None:
            x = x + control[2]
        return self.out_conv(F.silu(self.out_norm(x)))


@dataclass(frozen=True)
class ControlGeometry:
    embedding_dim: int = 64
    seed_channels: int = 32
    latent_size: int = 16
    base_channels: int = 32
    time_dim: int = 128

    def __post_init__(self):
        if self.latent_size % SEED_RATIO != 0:
            raise ConfigurationError(
                f"latent size must be divisible by {SEED_RATIO}, got {self.latent_size}")
        if min(self.embedding_dim, self.seed_channels, self.base_channels) < 1:
            raise ConfigurationError("control dimensions must be positive")

    @property
    def seed_size(self) -> int:
        return self.latent_size // SEED_RATIO

    @property
    def level_channels(self) -> tuple[int, int, int]:
        b = self.base_channels
        return (4 * b, 2 * b, b)

    @property
    def level_sizes(self) -> tuple[int, int, int]:
        s = self.latent_size
        return (s // 4, s // 2, s)

    @property
    def injection_specs(self) -> tuple[tuple[int, int], ...]:
        return tuple(zip(self.level_channels, self.level_sizes))


class _UpBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm = norm(out_ch)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.conv(x) + self.time_proj(temb)[:, :, None, None]
        return F.silu(self.norm(x))


class ControlBranch(nn.Module):
    """Embedding-to-feature-map stack feeding the backbone decoder.

    A bias-free linear layer reshapes the embedding into a
    [seed_channels, s, s] map with s = latent_size / 8; three upsample
    blocks then produce one map per decoder level. Each map passes through
    a zero-initialized 1x1 projection before being added to the backbone.
    """

    def __init__(self, geometry: ControlGeometry = ControlGeometry(), seed: int = 0):
        super().__init__()
        self.geometry = geometry
        g = geometry
        self.proj = nn.Linear(g.embedding_dim, g.seed_channels * g.seed_size ** 2, bias=False)
        self.time_mlp = TimeMLP(g.time_dim, g.time_dim)
        chans = (g.seed_channels,) + g.level_channels[:-1]
        self.blocks = nn.ModuleList(
            [_UpBlock(cin, cout, g.time_dim) for cin, cout in zip(chans, g.level_channels)])
        self.zero_projs = nn.ModuleList(
            [ZeroConv2d(c, c) for c in g.level_channels])
        seeded_init(self, "control", seed)
        for zp in self.zero_projs:
            zp.reset_to_zero()

    def project_seed(self, e: torch.Tensor) -> torch.Tensor:
        """Linear map from embedding to the spatial seed; no bias, so it is
        exactly linear in the embedding."""
        if e.ndim == 1:
            e = e[None]
        if e.ndim != 2 or e.shape[1] != self.geometry.embedding_dim:
            raise ArgumentError(
                f"expected [B, {self.geometry.embedding_dim}] embeddings, got {tuple(e.shape)}")
        g = self.geometry
        return self.proj(e).reshape(-1, g.seed_channels, g.seed_size, g.seed_size)

    def control_maps(self, e: torch.Tensor, t: torch.Tensor) -> list[torch.Tensor]:
        """Pre-projection branch features, one per decoder level."""
        x = self.project_seed(e)
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.geometry.time_dim))
        maps = []
        for block in self.blocks:
            x = block(x, temb)
            maps.append(x)
        return maps

    def injections(self, e: torch.Tensor, t: torch.Tensor) -> list[torch.Tensor]:
        """Additive decoder terms: zero projections applied to the maps."""
        return [zp(m) for zp, m in zip(self.zero_projs, self.control_maps(e, t))]

    def is_transparent(self) -> bool:
        return all(zp.is_zero() for zp in self.zero_projs)


def project_embedding(e: torch.Tensor, branch: ControlBranch) -> torch.Tensor:
    return branch.project_seed(e)


def validate_compatible(backbone: BackboneDenoiser, branch: ControlBranch) -> None:
    if backbone.geometry.injection_specs != branch.geometry.injection_specs:
        raise ConfigurationError(
            f"control branch levels {branch.geometry.injection_specs} do not match "
            f"backbone decoder levels {backbone.geometry.injection_specs}")
    if backbone.geometry.time_dim != branch.geometry.time_dim:
        raise ConfigurationError("backbone and branch disagree on time embedding width")


def _first_nonfinite_module(module: nn.Module, runner) -> str | None:
    bad: list[str] = []
    hooks = []

    def make_hook(name):
        def hook(_mod, _inp, out):
            tensors = out if isinstance(out, (tuple, list)) else (out,)
            for t in tensors:
                if isinstance(t, torch.Tensor) and not torch.isfinite(t).all():
                    bad.append(name)
                    return
        return hook

    for name, sub in module.named_modules():
        if name:
            hooks.append(sub.register_forward_hook(make_hook(name)))
    try:
        runner()
    finally:
        for h in hooks:
            h.remove()
    return bad[0] if bad else None


def denoise_conditioned(zt: torch.Tensor, t, mask_lat: torch.Tensor,
                        z_cond: torch.Tensor, e_cond: torch.Tensor,
                        backbone: BackboneDenoiser, branch: ControlBranch
                        ) -> torch.Tensor:
    """Noise prediction with identity control injected into the decoder."""
    validate_compatible(backbone, branch)
    if e_cond.ndim == 1:
        e_cond = e_cond[None].expand(zt.shape[0], -1)
    if e_cond.shape[0] != zt.shape[0]:
        raise ArgumentError(
            f"batch mismatch: {zt.shape[0]} latents vs {e_cond.shape[0]} embeddings")
    control = branch.injections(e_cond, t)
    eps_hat = backbone(zt, t, mask_lat, z_cond, control=control)
    if not torch.isfinite(eps_hat).all():
        name = _first_nonfinite_module(
            branch, lambda: branch.injections(e_cond, t))
        where = f"branch.{name}" if name else None
        if where is None:
            name = _first_nonfinite_module(
                backbone, lambda: backbone(zt, t, mask_lat, z_cond, control=control))
            where = f"backbone.{name}" if name else "output"
        raise NumericalError(f"non-finite activation in {where}")
    return eps_hat


def make_denoiser(backbone: BackboneDenoiser, branch: ControlBranch | None = None):
    """Close over the models as a plain (zt, t, mask, z_cond, e_cond) callable.

    With no branch the embedding argument is ignored and the backbone runs
    unconditioned.
    """
    if branch is None:
        return lambda zt, t, mask_lat, z_cond, e_cond: backbone(zt, t, mask_lat, z_cond)
    validate_compatible(backbone, branch)
    return lambda zt, t, mask_lat, z_cond, e_cond: denoise_conditioned(
        zt, t, mask_lat, z_cond, e_cond, backbone, branch)


def save_backbone(backbone: BackboneDenoiser, path: str | Path,
                  extra: dict | None = None) -> Path:
    g = backbone.geometry
    geometry = {"latent_channels": g.latent_channels, "latent_size": g.latent_size,
                "base_channels": g.base_channels, "time_dim": g.time_dim}
    save_checkpoint(path, "backbone", backbone.state_dict(), geometry, extra or {})
    return Path(path)


def load_backbone(path: str | Path) -> BackboneDenoiser:
    blob = load_checkpoint(path, "backbone")
    backbone = BackboneDenoiser(BackboneGeometry(**blob["geometry"]))
    backbone.load_state_dict(blob["state_dict"])
    return freeze(backbone)


def save_branch(branch: ControlBranch, path: str | Path, extra: dict | None = None) -> Path:
    g = branch.geometry
    geometry = {"embedding_dim": g.embedding_dim, "seed_channels": g.seed_channels,
                "latent_size": g.latent_size, "base_channels": g.base_channels,
                "time_dim": g.time_dim}
    save_checkpoint(path, "branch", branch.state_dict(), geometry, extra or {})
    return Path(path)


def load_branch(path: str | Path) -> ControlBranch:
    """Load a control branch for inference; the result is frozen."""
    blob = load_checkpoint(path, "branch")
    branch = ControlBranch(ControlGeometry(**blob["geometry"]))
    branch.load_state_dict(blob["state_dict"])
    return freeze(branch)
