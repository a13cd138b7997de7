"""YAML run configuration with strict key checking.

Every pipeline stage reads its knobs from one nested config. Unknown keys
are rejected with the offending dotted path, so typos fail loudly instead
of silently running with defaults. All sections are optional; an empty or
absent file yields the defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .autoencoder import VAEGeometry, VAETrainConfig
from .errors import ConfigurationError
from .identity import EncoderGeometry, EncoderTrainConfig
from .losses import LossWeights
from .trainer import BackboneTrainConfig, TrainConfig

SEED_RATIO = 8


@dataclass(frozen=True)
class CorpusSection:
    identities: int = 24
    per_identity: int = 6
    image_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.identities < 1 or self.per_identity < 1:
            raise ConfigurationError("corpus needs positive identity and sample counts")
        if self.image_size < 16:
            raise ConfigurationError(f"corpus image_size too small: {self.image_size}")


@dataclass(frozen=True)
class MaskSection:
    pad_frac: float = 0.25
    fill: float = 0.0

    def __post_init__(self):
        if self.pad_frac < 0:
            raise ConfigurationError("pad_frac must be >= 0")
        if not -1.0 <= self.fill <= 1.0:
            raise ConfigurationError("fill must be in [-1, 1]")


@dataclass(frozen=True)
class VAESection:
    latent_channels: int = 4
    downsample_factor: int = 4
    base_channels: int = 32
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 1e-3
    kl_weight: float = 1e-6
    seed: int = 0
    val_fraction: float = 0.1

    def geometry(self, image_size: int) -> VAEGeometry:
        return VAEGeometry(image_size=image_size, latent_channels=self.latent_channels,
                           downsample_factor=self.downsample_factor,
                           base_channels=self.base_channels)

    def train_config(self) -> VAETrainConfig:
        return VAETrainConfig(steps=self.steps, batch_size=self.batch_size,
                              learning_rate=self.learning_rate, kl_weight=self.kl_weight,
                              seed=self.seed, val_fraction=self.val_fraction)


@dataclass(frozen=True)
class EncoderSection:
    embedding_dim: int = 64
    feature_dim: int = 128
    base_channels: int = 32
    steps: int = 1500
    batch_size: int = 16
    learning_rate: float = 1e-3
    scale: float = 16.0
    margin: float = 0.2
    seed: int = 0

    def geometry(self, image_size: int) -> EncoderGeometry:
        return EncoderGeometry(image_size=image_size, embedding_dim=self.embedding_dim,
                               feature_dim=self.feature_dim, base_channels=self.base_channels)

    def train_config(self) -> EncoderTrainConfig:
        return EncoderTrainConfig(steps=self.steps, batch_size=self.batch_size,
                                  learning_rate=self.learning_rate, scale=self.scale,
                                  margin=self.margin, seed=self.seed)


@dataclass(frozen=True)
class BackboneSection:
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 2e-4
    seed: int = 0
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    grad_clip: float = 1.0

    def train_config(self) -> BackboneTrainConfig:
        return BackboneTrainConfig(steps=self.steps, batch_size=self.batch_size,
                                   learning_rate=self.learning_rate, seed=self.seed,
                                   timesteps=self.timesteps, beta_start=self.beta_start,
                                   beta_end=self.beta_end, grad_clip=self.grad_clip)


@dataclass(frozen=True)
class TrainSection:
    steps: int = 1000
    batch_size: int = 4
    learning_rate: float = 5e-6
    seed: int = 0
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ts_frac: float = 0.1
    grad_clip: float = 1.0
    lambda_id: float = 0.1
    lambda_trip: float = 0.05
    margin: float = 0.3
    mask_regions: tuple[str, ...] = ("eyes", "nose", "mouth")
    checkpoint_every: int = 500
    log_every: int = 1

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, seed=self.seed,
                           timesteps=self.timesteps, beta_start=self.beta_start,
                           beta_end=self.beta_end, ts_frac=self.ts_frac,
                           grad_clip=self.grad_clip,
                           weights=LossWeights(lambda_id=self.lambda_id,
                                               lambda_trip=self.lambda_trip,
                                               margin=self.margin),
                           mask_regions=tuple(self.mask_regions),
                           checkpoint_every=self.checkpoint_every,
                           log_every=self.log_every)


@dataclass(frozen=True)
class SampleSection:
    seed: int = 0


@dataclass(frozen=True)
class EvalSection:
    region: str = "eyes"
    kid_subset_size: int = 100
    kid_subsets: int = 10

    def __post_init__(self):
        if self.region not in ("eyes", "nose", "mouth"):
            raise ConfigurationError(f"unknown eval region {self.region!r}")
        if self.kid_subset_size < 2 or self.kid_subsets < 1:
            raise ConfigurationError("bad KID subset parameters")


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    masks: MaskSection = field(default_factory=MaskSection)
    vae: VAESection = field(default_factory=VAESection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        size = self.corpus.image_size
        if size % self.vae.downsample_factor != 0:
            raise ConfigurationError(
                f"image_size {size} not divisible by downsample_factor "
                f"{self.vae.downsample_factor}")
        latent = size // self.vae.downsample_factor
        if latent % SEED_RATIO != 0:
            raise ConfigurationError(
                f"latent size {latent} must be divisible by the fixed seed ratio "
                f"{SEED_RATIO}")


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"config section '{path}' must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"unknown config key '{path}.{unknown[0]}'")
    kwargs = {}
    for f in fields(cls):
        if f.name in data:
            v = data[f.name]
            if f.name == "mask_regions":
                if not isinstance(v, (list, tuple)):
                    raise ConfigurationError(f"'{path}.mask_regions' must be a list")
                v = tuple(v)
            kwargs[f.name] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad values in config section '{path}': {exc}") from exc


_SECTIONS = {f.name: f for f in fields(RunConfig)}


def config_from_dict(data: dict | None) -> RunConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError("top-level config must be a mapping")
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigurationError(f"unknown config section '{unknown[0]}'")
    kwargs = {}
    for name, f in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build(f.default_factory, data[name], name)
    return RunConfig(**kwargs)


def load_config(path: str | Path | None) -> RunConfig:
    """Load a YAML config file; None or an empty file yields all defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc
    return config_from_dict(data)


def config_to_dict(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["train"]["mask_regions"] = list(d["train"]["mask_regions"])
    return d


def save_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))
    return path
