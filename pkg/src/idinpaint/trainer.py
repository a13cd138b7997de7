"""Branch training loop: batches, the single-step proxy, and orchestration.

Only the control branch receives gradient updates; the autoencoder,
identity encoder and backbone stay frozen throughout. Identity supervision
comes from a single-step denoising proxy: perturb the clean latent to a
small timestep, run one conditioned denoiser evaluation, invert the
forward process algebraically and decode, which keeps the whole path from
branch weights to embedding differentiable without unrolling the sampler.

Every random draw comes from a generator derived from (seed, step), so a
resumed run continues the exact trajectory of an uninterrupted one.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import manifest as mio
from .artifacts import load_checkpoint, save_checkpoint, torch_generator, weights_hash
from .autoencoder import ConvVAE
from .control import (BackboneDenoiser, BackboneGeometry, ControlBranch, ControlGeometry,
                      denoise_conditioned, validate_compatible)
from .diffusion import NoiseSchedule, forward_diffuse, make_schedule, mask_to_latent, predict_x0
from .errors import ConfigurationError, DataError, NumericalError
from .identity import RecognitionEncoder
from .losses import (LossBreakdown, LossWeights, denoise_loss, id_loss, total_loss,
                     total_loss_tensor, triplet_loss)
from .nets import freeze

log = logging.getLogger(__name__)

REGION_KEYS = {"eyes": "eyes_mask", "nose": "nose_mask", "mouth": "mouth_mask"}


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 4
    learning_rate: float = 5e-6
    seed: int = 0
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ts_frac: float = 0.1
    grad_clip: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    mask_regions: tuple[str, ...] = ("eyes", "nose", "mouth")
    checkpoint_every: int = 500
    log_every: int = 1

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.timesteps < 1:
            raise ConfigurationError("steps, batch_size and timesteps must be positive")
        if self.learning_rate <= 0 or self.grad_clip <= 0:
            raise ConfigurationError("learning_rate and grad_clip must be positive")
        if not 0.0 < self.ts_frac <= 1.0:
            raise ConfigurationError(f"ts_frac must be in (0, 1], got {self.ts_frac}")
        bad = [r for r in self.mask_regions if r not in REGION_KEYS]
        if bad or not self.mask_regions:
            raise ConfigurationError(f"unknown mask regions {bad}")

    @property
    def ts_max(self) -> int:
        return max(1, math.ceil(self.ts_frac * self.timesteps))


@dataclass
class TrainData:
    """Preloaded corpus: images, per-region masks, labels, cached embeddings."""

    images: torch.Tensor
    masks: dict[str, torch.Tensor]
    identities: list[str]
    e_cond: torch.Tensor


def load_train_data(mask_manifest: str | Path, encoder: RecognitionEncoder,
                    regions: tuple[str, ...]) -> TrainData:
    rows = mio.read_manifest(mask_manifest)
    size = encoder.geometry.image_size
    images, identities = [], []
    masks: dict[str, list[torch.Tensor]] = {r: [] for r in regions}
    for row in rows:
        if "identity_id" not in row:
            raise DataError(f"manifest row missing identity_id: {row}")
        images.append(mio.load_image(mio.resolve(mask_manifest, row["image_path"]), size))
        identities.append(str(row["identity_id"]))
        for region in regions:
            key = REGION_KEYS[region]
            if key not in row:
                raise DataError(f"manifest row missing {key!r}: {row}")
            masks[region].append(mio.load_mask(mio.resolve(mask_manifest, row[key])))
    image_batch = torch.stack(images)
    with torch.no_grad():
        e_cond = torch.cat([encoder(image_batch[i:i + 32])
                            for i in range(0, len(image_batch), 32)])
    return TrainData(images=image_batch,
                     masks={r: torch.stack(m) for r, m in masks.items()},
                     identities=identities, e_cond=e_cond)


@dataclass
class TrainBatch:
    images: torch.Tensor
    masks: torch.Tensor
    e_cond: torch.Tensor
    neg_index: torch.Tensor
    identities: list[str]


def build_batch(data: TrainData, config: TrainConfig, step: int) -> TrainBatch:
    """Sample a batch with one mask region per item and in-batch negatives.

    The negative for item i is another batch item with a different
    identity; when the batch happens to contain a single identity the
    negative falls back to any other item and a warning is logged.
    """
    g = torch_generator("batch", config.seed, step)
    n = len(data.images)
    idx = torch.randint(0, n, (config.batch_size,), generator=g)
    region_pick = torch.randint(0, len(config.mask_regions), (config.batch_size,), generator=g)
    masks = torch.stack([
        data.masks[config.mask_regions[int(region_pick[i])]][idx[i]]
        for i in range(config.batch_size)])[:, None]
    identities = [data.identities[int(i)] for i in idx]
    neg = torch.empty(config.batch_size, dtype=torch.long)
    for i in range(config.batch_size):
        other = [j for j in range(config.batch_size)
                 if j != i and identities[j] != identities[i]]
        if not other:
            other = [j for j in range(config.batch_size) if j != i] or [i]
            log.warning("batch at step %d has no cross-identity negative for item %d", step, i)
        pick = int(torch.randint(0, len(other), (), generator=g))
        neg[i] = other[pick]
    return TrainBatch(images=data.images[idx], masks=masks, e_cond=data.e_cond[idx],
                      neg_index=neg, identities=identities)


@dataclass
class TrainState:
    vae: ConvVAE
    encoder: RecognitionEncoder
    backbone: BackboneDenoiser
    branch: ControlBranch
    optimizer: torch.optim.Optimizer
    sched: NoiseSchedule
    config: TrainConfig
    out_dir: Path | None = None
    step: int = 0


def proxy_generate(z0: torch.Tensor, t_s, eps: torch.Tensor, mask_lat: torch.Tensor,
                   z_cond: torch.Tensor, e_cond: torch.Tensor, sched: NoiseSchedule,
                   backbone: BackboneDenoiser, branch: ControlBranch, vae: ConvVAE
                   ) -> torch.Tensor:
    """Cheap differentiable generation: one denoiser call at a small t.

    Returns decoded images; gradients flow into the branch through the
    noise prediction.
    """
    z_ts = forward_diffuse(z0, t_s, eps, sched)
    eps_hat = denoise_conditioned(z_ts, t_s, mask_lat, z_cond, e_cond, backbone, branch)
    z0_hat = predict_x0(z_ts, eps_hat, t_s, sched)
    return vae.decode(z0_hat)


def train_step(state: TrainState, batch: TrainBatch, step: int) -> LossBreakdown:
    """One optimization step over the branch parameters."""
    cfg = state.config
    g = torch_generator("step", cfg.seed, step)
    with torch.no_grad():
        z0 = state.vae.encode(batch.images)
        z_cond = state.vae.encode(batch.images * (1.0 - batch.masks))
    mask_lat = mask_to_latent(batch.masks, state.vae.geometry.downsample_factor)

    t = int(torch.randint(1, state.sched.steps + 1, (), generator=g))
    eps = torch.randn(z0.shape, generator=g)
    zt = forward_diffuse(z0, t, eps, state.sched)
    eps_hat = denoise_conditioned(zt, t, mask_lat, z_cond, batch.e_cond,
                                  state.backbone, state.branch)

    supervised = cfg.weights.lambda_id > 0 or cfg.weights.lambda_trip > 0
    ts_max = min(cfg.ts_max, state.sched.steps)
    if t <= ts_max:
        t_s, z_ts, eps_s, eps_hat_s = t, zt, eps, eps_hat
    else:
        t_s = int(torch.randint(1, ts_max + 1, (), generator=g))
        eps_s = torch.randn(z0.shape, generator=g)
        z_ts = forward_diffuse(z0, t_s, eps_s, state.sched)
        ctx = torch.enable_grad() if supervised else torch.no_grad()
        with ctx:
            eps_hat_s = denoise_conditioned(z_ts, t_s, mask_lat, z_cond, batch.e_cond,
                                            state.backbone, state.branch)
    ctx = torch.enable_grad() if supervised else torch.no_grad()
    with ctx:
        z0_hat = predict_x0(z_ts, eps_hat_s, t_s, state.sched)
        gen = state.vae.decode(z0_hat)
        e_gen = state.encoder(gen)
    e_pos = batch.e_cond
    e_neg = batch.e_cond[batch.neg_index]

    den = denoise_loss(eps, eps_hat)
    id_term = id_loss(e_gen, e_pos)
    trip = triplet_loss(e_gen, e_pos, e_neg, cfg.weights.margin)
    total = total_loss_tensor(den, id_term, trip, cfg.weights) if supervised else den

    if not all(torch.isfinite(v) for v in (den, id_term, trip, total)):
        dump = None
        if state.out_dir is not None:
            dump = Path(state.out_dir) / f"nan_dump_step{step}.pt"
            torch.save({"step": step, "t": t, "t_s": t_s, "zt": zt, "eps": eps,
                        "mask_lat": mask_lat, "z_cond": z_cond,
                        "e_cond": batch.e_cond}, dump)
        raise NumericalError(f"non-finite loss at step {step}"
                             + (f"; inputs dumped to {dump}" if dump else ""))
    breakdown = total_loss(den, id_term, trip, cfg.weights)
    state.optimizer.zero_grad()
    total.backward()
    torch.nn.utils.clip_grad_norm_(state.branch.parameters(), cfg.grad_clip)
    state.optimizer.step()
    state.step = step
    return breakdown


def _frozen_hashes(state: TrainState) -> dict[str, str]:
    return {"vae": weights_hash(state.vae.state_dict()),
            "encoder": weights_hash(state.encoder.state_dict()),
            "backbone": weights_hash(state.backbone.state_dict())}


def save_train_checkpoint(state: TrainState, path: str | Path) -> Path:
    g = state.branch.geometry
    geometry = {"embedding_dim": g.embedding_dim, "seed_channels": g.seed_channels,
                "latent_size": g.latent_size, "base_channels": g.base_channels,
                "time_dim": g.time_dim}
    extra = {"step": state.step, "optimizer": state.optimizer.state_dict(),
             "config": asdict(state.config), "frozen_hashes": _frozen_hashes(state)}
    return save_checkpoint(path, "branch", state.branch.state_dict(), geometry, extra)


def latest_checkpoint(out_dir: str | Path) -> Path | None:
    ckpts = sorted(Path(out_dir).glob("checkpoints/step-*.pt"))
    return ckpts[-1] if ckpts else None


def train(mask_manifest: str | Path, vae: ConvVAE, encoder: RecognitionEncoder,
          backbone: BackboneDenoiser, out_dir: str | Path,
          config: TrainConfig = TrainConfig(), resume: bool = False) -> dict:
    """Full branch-training run with logging, checkpoints and resume.

    Returns a summary with the final checkpoint path and proof that the
    frozen components did not move.
    """
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    freeze(vae)
    freeze(encoder)
    freeze(backbone)
    data = load_train_data(mask_manifest, encoder, config.mask_regions)
    sched = make_schedule(config.timesteps, config.beta_start, config.beta_end)
    branch = ControlBranch(ControlGeometry(
        embedding_dim=encoder.geometry.embedding_dim,
        latent_size=backbone.geometry.latent_size,
        base_channels=backbone.geometry.base_channels,
        time_dim=backbone.geometry.time_dim), seed=config.seed)
    validate_compatible(backbone, branch)
    optimizer = torch.optim.Adam(branch.parameters(), lr=config.learning_rate)
    state = TrainState(vae=vae, encoder=encoder, backbone=backbone, branch=branch,
                       optimizer=optimizer, sched=sched, config=config, out_dir=out_dir)
    hashes_before = _frozen_hashes(state)

    start = 0
    log_path = out_dir / "train_log.jsonl"
    if resume:
        ckpt = latest_checkpoint(out_dir)
        if ckpt is None:
            raise DataError(f"resume requested but no checkpoint under {out_dir}")
        blob = load_checkpoint(ckpt, "branch")
        branch.load_state_dict(blob["state_dict"])
        optimizer.load_state_dict(blob["extra"]["optimizer"])
        start = int(blob["extra"]["step"])
        state.step = start
        saved = dict(blob["extra"]["config"])
        current = asdict(config)
        saved.pop("steps", None)
        current.pop("steps", None)
        if saved != current:
            raise ConfigurationError("resume config does not match checkpoint config "
                                     "(only the step target may change)")
        if log_path.exists():
            kept = [line for line in log_path.read_text().splitlines()
                    if line.strip() and json.loads(line)["step"] <= start]
            log_path.write_text("".join(k + "\n" for k in kept))
    elif latest_checkpoint(out_dir) is not None:
        raise ConfigurationError(
            f"{out_dir} already contains checkpoints; pass resume to continue")
    else:
        log_path.write_text("")

    log.info("branch training: steps %d-%d, batch %d, %d samples",
             start + 1, config.steps, config.batch_size, len(data.images))
    last = None
    with open(log_path, "a") as log_fh:
        for step in range(start + 1, config.steps + 1):
            batch = build_batch(data, config, step)
            last = train_step(state, batch, step)
            if step % config.log_every == 0 or step == config.steps:
                entry = {"step": step, **last.as_dict()}
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            if step % config.checkpoint_every == 0 or step == config.steps:
                path = out_dir / "checkpoints" / f"step-{step:07d}.pt"
                save_train_checkpoint(state, path)
                log.info("checkpoint written: %s", path)
    hashes_after = _frozen_hashes(state)
    final = latest_checkpoint(out_dir)
    return {"final_step": state.step, "checkpoint": str(final) if final else None,
            "log": str(log_path), "frozen_before": hashes_before,
            "frozen_after": hashes_after,
            "frozen_unchanged": hashes_before == hashes_after,
            "last_losses": last.as_dict() if last else None}


@dataclass(frozen=True)
class BackboneTrainConfig:
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 2e-4
    seed: int = 0
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    grad_clip: float = 1.0
    mask_regions: tuple[str, ...] = ("eyes", "nose", "mouth")
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigurationError("steps and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")


def pretrain_backbone(mask_manifest: str | Path, vae: ConvVAE,
                      config: BackboneTrainConfig = BackboneTrainConfig(),
                      ) -> tuple[BackboneDenoiser, list[dict]]:
    """Train the unconditional masked denoiser that later gets frozen.

    No identity information reaches the backbone; it learns to fill holes
    from surrounding context and the hole mask alone.
    """
    rows = mio.read_manifest(mask_manifest)
    size = vae.geometry.image_size
    images, masks = [], {r: [] for r in config.mask_regions}
    for row in rows:
        images.append(mio.load_image(mio.resolve(mask_manifest, row["image_path"]), size))
        for region in config.mask_regions:
            masks[region].append(mio.load_mask(mio.resolve(mask_manifest,
                                                           row[REGION_KEYS[region]])))
    image_batch = torch.stack(images)
    mask_batch = {r: torch.stack(m) for r, m in masks.items()}

    freeze(vae)
    sched = make_schedule(config.timesteps, config.beta_start, config.beta_end)
    backbone = BackboneDenoiser(BackboneGeometry(
        latent_channels=vae.geometry.latent_channels,
        latent_size=vae.geometry.latent_size), seed=config.seed)
    opt = torch.optim.Adam(backbone.parameters(), lr=config.learning_rate)
    history = []
    for step in range(1, config.steps + 1):
        g = torch_generator("backbone-step", config.seed, step)
        idx = torch.randint(0, len(image_batch), (config.batch_size,), generator=g)
        region_pick = torch.randint(0, len(config.mask_regions), (config.batch_size,),
                                    generator=g)
        mask = torch.stack([mask_batch[config.mask_regions[int(region_pick[i])]][idx[i]]
                            for i in range(config.batch_size)])[:, None]
        batch = image_batch[idx]
        with torch.no_grad():
            z0 = vae.encode(batch)
            z_cond = vae.encode(batch * (1.0 - mask))
        mask_lat = mask_to_latent(mask, vae.geometry.downsample_factor)
        t = int(torch.randint(1, sched.steps + 1, (), generator=g))
        eps = torch.randn(z0.shape, generator=g)
        zt = forward_diffuse(z0, t, eps, sched)
        eps_hat = backbone(zt, t, mask_lat, z_cond)
        loss = denoise_loss(eps, eps_hat)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite backbone loss at step {step}")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(backbone.parameters(), config.grad_clip)
        opt.step()
        if step % config.log_every == 0 or step == config.steps:
            history.append({"step": step, "loss": float(loss.detach())})
    freeze(backbone)
    return backbone, history
