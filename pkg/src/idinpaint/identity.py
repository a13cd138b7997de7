"""Small face-recognition encoder with an angular-margin training head.

The encoder maps images to unit-norm embeddings. It is trained once as a
closed-set classifier whose logits are cosine similarities against
per-class weight directions, with an additive angular margin on the true
class; after pretraining the head is discarded and the trunk is frozen.
The penultimate feature layer doubles as the feature extractor for the
distribution metrics.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .artifacts import load_checkpoint, save_checkpoint, torch_generator, weights_hash
from .autoencoder import load_corpus_images
from .errors import ArgumentError, ConfigurationError, DataError, NumericalError
from .nets import freeze, norm, seeded_init


@dataclass(frozen=True)
class EncoderGeometry:
    image_size: int = 64
    embedding_dim: int = 64
    feature_dim: int = 128
    base_channels: int = 32

    def __post_init__(self):
        if self.image_size % 16 != 0:
            raise ConfigurationError(f"image size must be divisible by 16, got {self.image_size}")
        if min(self.embedding_dim, self.feature_dim, self.base_channels) < 1:
            raise ConfigurationError("encoder dimensions must be positive")


class RecognitionEncoder(nn.Module):
    def __init__(self, geometry: EncoderGeometry = EncoderGeometry(), seed: int = 0):
        super().__init__()
        self.geometry = geometry
        ch = geometry.base_channels
        widths = [ch, ch * 2, ch * 4, ch * 4]
        blocks = []
        w_in = 3
        for w in widths:
            blocks.append(nn.Sequential(
                nn.Conv2d(w_in, w, 3, stride=2, padding=1), norm(w), nn.SiLU()))
            w_in = w
        self.blocks = nn.ModuleList(blocks)
        spatial = geometry.image_size // (2 ** len(widths))
        self.flat_dim = widths[-1] * spatial * spatial
        self.feature_fc = nn.Linear(self.flat_dim, geometry.feature_dim)
        self.embed_fc = nn.Linear(geometry.feature_dim, geometry.embedding_dim)
        seeded_init(self, "encoder", seed)

    def _check(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 3:
            x = x[None]
        s = self.geometry.image_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
            raise ArgumentError(f"expected [B, 3, {s}, {s}] images, got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise NumericalError("non-finite values in encoder input")
        return x

    def feature_maps(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-stage conv activations, used by the perceptual distance proxy."""
        x = self._check(x)
        maps = []
        for block in self.blocks:
            x = block(x)
            maps.append(x)
        return maps

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Penultimate feature vector [B, feature_dim]."""
        h = self.feature_maps(x)[-1]
        return F.silu(self.feature_fc(h.flatten(1)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        raw = self.embed_fc(self.features(x))
        return F.normalize(raw, dim=-1, eps=1e-8)

    @property
    def extractor_id(self) -> str:
        return f"recognition-trunk-f{self.geometry.feature_dim}-{weights_hash(self.state_dict())[:12]}"


def embed(x: torch.Tensor, encoder: RecognitionEncoder) -> torch.Tensor:
    """Unit-norm identity embedding; [D] for a single image, [B, D] batched."""
    squeeze = x.ndim == 3
    e = encoder(x)
    return e[0] if squeeze else e


def cosine_distance(u: torch.Tensor, v: torch.Tensor) -> float:
    """1 - dot(u, v) for two unit-norm embedding vectors."""
    u = torch.as_tensor(u).flatten()
    v = torch.as_tensor(v).flatten()
    if u.shape != v.shape:
        raise ArgumentError(f"embedding shapes differ: {tuple(u.shape)} vs {tuple(v.shape)}")
    for name, t in (("u", u), ("v", v)):
        n = float(t.norm())
        if abs(n - 1.0) > 1e-4:
            raise ArgumentError(f"embedding {name} is not unit-norm (|{name}| = {n:.6f})")
    return float(1.0 - (u * v).sum())


class MarginHead(nn.Module):
    """Cosine classifier with an additive angular margin on the target class."""

    def __init__(self, embedding_dim: int, n_classes: int, scale: float = 16.0,
                 margin: float = 0.2, seed: int = 0):
        super().__init__()
        if n_classes < 2:
            raise ConfigurationError("margin head needs at least two classes")
        self.scale = scale
        self.margin = margin
        self.weight = nn.Parameter(torch.empty(n_classes, embedding_dim))
        with torch.no_grad():
            self.weight.normal_(0.0, 0.01, generator=torch_generator("margin-head", seed))

    def forward(self, emb: torch.Tensor, labels: torch.Tensor | None = None) -> torch.Tensor:
        w = F.normalize(self.weight, dim=-1)
        cos = (emb @ w.t()).clamp(-1.0 + 1e-7, 1.0 - 1e-7)
        if labels is None:
            return self.scale * cos
        theta = torch.acos(cos)
        target = F.one_hot(labels, self.weight.shape[0]).to(cos.dtype)
        return self.scale * torch.cos(theta + self.margin * target)


@dataclass(frozen=True)
class EncoderTrainConfig:
    steps: int = 1500
    batch_size: int = 16
    learning_rate: float = 1e-3
    scale: float = 16.0
    margin: float = 0.2
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 2:
            raise ConfigurationError("need steps >= 1 and batch_size >= 2")
        if self.learning_rate <= 0 or self.scale <= 0 or self.margin < 0:
            raise ConfigurationError("bad margin-head hyperparameters")


def pretrain_encoder(manifest_path: str | Path,
                     config: EncoderTrainConfig = EncoderTrainConfig(),
                     geometry: EncoderGeometry = EncoderGeometry(),
                     ) -> tuple[RecognitionEncoder, dict]:
    """Train the recognition encoder on a labeled corpus, then freeze it.

    Requires at least two identities with at least two samples each.
    Returns the frozen encoder and a stats dict with the loss history,
    final closed-set accuracy and the intra/inter similarity gap.
    """
    images, identities = load_corpus_images(manifest_path, geometry.image_size)
    names = sorted(set(identities))
    if len(names) < 2:
        raise DataError(f"need >= 2 identities to train the encoder, got {len(names)}")
    counts = {n: identities.count(n) for n in names}
    thin = [n for n, c in counts.items() if c < 2]
    if thin:
        raise DataError(f"identities with fewer than 2 samples: {thin[:5]}")
    labels = torch.tensor([names.index(n) for n in identities])

    encoder = RecognitionEncoder(geometry, seed=config.seed)
    head = MarginHead(geometry.embedding_dim, len(names), config.scale,
                      config.margin, seed=config.seed)
    opt = torch.optim.Adam(list(encoder.parameters()) + list(head.parameters()),
                           lr=config.learning_rate)
    history = []
    for step in range(1, config.steps + 1):
        g = torch_generator("encoder-step", config.seed, step)
        idx = torch.randint(0, len(images), (config.batch_size,), generator=g)
        emb = encoder(images[idx])
        logits = head(emb, labels[idx])
        loss = F.cross_entropy(logits, labels[idx])
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite encoder loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.log_every == 0 or step == config.steps:
            history.append({"step": step, "loss": float(loss.detach())})

    freeze(encoder)
    stats = evaluate_encoder(encoder, images, labels)
    stats["history"] = history
    stats["n_identities"] = len(names)
    return encoder, stats


def evaluate_encoder(encoder: RecognitionEncoder, images: torch.Tensor,
                     labels: torch.Tensor) -> dict:
    """Closed-set nearest-centroid accuracy and intra/inter similarity gap."""
    with torch.no_grad():
        emb = torch.cat([encoder(images[i:i + 32]) for i in range(0, len(images), 32)])
    n_classes = int(labels.max()) + 1
    centroids = torch.stack([
        F.normalize(emb[labels == c].mean(0), dim=-1, eps=1e-8) for c in range(n_classes)])
    pred = (emb @ centroids.t()).argmax(dim=1)
    accuracy = float((pred == labels).float().mean())
    sims = emb @ emb.t()
    same = labels[:, None] == labels[None, :]
    off_diag = ~torch.eye(len(labels), dtype=torch.bool)
    intra = float(sims[same & off_diag].mean())
    inter = float(sims[~same].mean())
    return {"accuracy": accuracy, "intra_sim": intra, "inter_sim": inter,
            "gap": intra - inter}


def save_encoder(encoder: RecognitionEncoder, path: str | Path,
                 extra: dict | None = None) -> Path:
    geometry = {
        "image_size": encoder.geometry.image_size,
        "embedding_dim": encoder.geometry.embedding_dim,
        "feature_dim": encoder.geometry.feature_dim,
        "base_channels": encoder.geometry.base_channels,
    }
    save_checkpoint(path, "encoder", encoder.state_dict(), geometry, extra or {})
    return Path(path)


def load_encoder(path: str | Path) -> RecognitionEncoder:
    blob = load_checkpoint(path, "encoder")
    encoder = RecognitionEncoder(EncoderGeometry(**blob["geometry"]))
    encoder.load_state_dict(blob["state_dict"])
    return freeze(encoder)
