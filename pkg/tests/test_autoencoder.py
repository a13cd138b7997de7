"""Convolutional VAE: geometry, codec shapes, short training runs, persistence."""

from __future__ import annotations

import pytest
import torch

from idinpaint.autoencoder import (
    ConvVAE,
    VAEGeometry,
    VAETrainConfig,
    load_corpus_images,
    load_vae,
    reconstruction_mae,
    save_vae,
    train_autoencoder,
)
from idinpaint.errors import ArgumentError, ConfigurationError, DataError
from idinpaint.manifest import save_image, write_manifest
from idinpaint.synthfaces import generate_corpus


def test_geometry_defaults_and_latent_size():
    g = VAEGeometry()
    assert g.image_size == 64 and g.latent_channels == 4
    assert g.downsample_factor == 4 and g.latent_size == 16
    assert g.stages == 2


def test_geometry_validation():
    with pytest.raises(ConfigurationError):
        VAEGeometry(downsample_factor=3)
    with pytest.raises(ConfigurationError):
        VAEGeometry(image_size=30)
    with pytest.raises(ConfigurationError):
        VAEGeometry(image_size=0)


def test_encode_decode_shapes():
    vae = ConvVAE(VAEGeometry(image_size=32), seed=0)
    x = torch.zeros(2, 3, 32, 32)
    with torch.no_grad():
        z = vae.encode(x)
        y = vae.decode(z)
    assert z.shape == (2, 4, 8, 8)
    assert y.shape == (2, 3, 32, 32)
    assert float(y.abs().max()) <= 1.0  # tanh output range

    single = vae.encode(torch.zeros(3, 32, 32))
    assert single.shape == (4, 8, 8)
    assert vae.decode(single).shape == (3, 32, 32)
    assert vae.downsample_factor == 4


def test_encode_rejects_wrong_size():
    vae = ConvVAE(VAEGeometry(image_size=32), seed=0)
    with pytest.raises(ArgumentError):
        vae.encode(torch.zeros(1, 3, 64, 64))
    with pytest.raises(ArgumentError):
        vae.decode(torch.zeros(1, 4, 4, 4))


def test_posterior_mean_logvar_finite():
    vae = ConvVAE(VAEGeometry(image_size=32), seed=1)
    with torch.no_grad():
        mu, logvar = vae.posterior(torch.randn(2, 3, 32, 32,
                                               generator=torch.Generator().manual_seed(0)))
    assert mu.shape == logvar.shape == (2, 4, 8, 8)
    assert torch.isfinite(mu).all() and torch.isfinite(logvar).all()
    assert float(logvar.max()) <= 10.0 and float(logvar.min()) >= -20.0


def test_seeded_construction_reproducible():
    a = ConvVAE(VAEGeometry(image_size=32), seed=5)
    b = ConvVAE(VAEGeometry(image_size=32), seed=5)
    c = ConvVAE(VAEGeometry(image_size=32), seed=6)
    for (na, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb), na
    assert any(not torch.equal(pa, pc) for (_, pa), (_, pc)
               in zip(a.named_parameters(), c.named_parameters()))


def _single_image_manifest(tmp_path):
    g = torch.Generator().manual_seed(3)
    img = torch.rand(3, 32, 32, generator=g) * 2 - 1
    save_image(img, tmp_path / "images" / "only.png")
    man = tmp_path / "corpus.jsonl"
    write_manifest(man, [{"image_path": "images/only.png", "identity_id": "id000",
                          "landmark_path": "none"}])
    return man, img


def test_memorizes_single_image(tmp_path):
    man, img = _single_image_manifest(tmp_path)
    cfg = VAETrainConfig(steps=220, batch_size=2, learning_rate=2e-3, seed=0,
                         val_fraction=0.0, log_every=50)
    vae, history = train_autoencoder(man, cfg, geometry=VAEGeometry(image_size=32))
    assert history[-1]["loss"] < history[0]["loss"]
    mae = reconstruction_mae(vae, img[None])
    assert mae < 0.08
    assert all(not p.requires_grad for p in vae.parameters())


def test_training_is_deterministic(tmp_path):
    corpus = generate_corpus(tmp_path / "c", n_identities=2, per_identity=2,
                             size=32, seed=1)
    cfg = VAETrainConfig(steps=12, batch_size=2, seed=4, log_every=4)
    geo = VAEGeometry(image_size=32)
    vae1, h1 = train_autoencoder(corpus, cfg, geometry=geo)
    vae2, h2 = train_autoencoder(corpus, cfg, geometry=geo)
    from idinpaint.artifacts import module_hash
    assert module_hash(vae1) == module_hash(vae2)
    assert h1 == h2


def test_load_corpus_images(tmp_path):
    corpus = generate_corpus(tmp_path / "c", n_identities=2, per_identity=3,
                             size=32, seed=2)
    images, identities = load_corpus_images(corpus, 32)
    assert images.shape == (6, 3, 32, 32)
    assert len(identities) == 6 and len(set(identities)) == 2


def test_save_load_roundtrip(tmp_path):
    vae = ConvVAE(VAEGeometry(image_size=32), seed=9)
    p = save_vae(vae, tmp_path / "vae.pt", extra={"note": "test"})
    back = load_vae(p)
    x = torch.randn(1, 3, 32, 32, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        assert torch.equal(back.encode(x), vae.encode(x))
    assert back.geometry == vae.geometry


def test_load_vae_rejects_other_kinds(tmp_path):
    from idinpaint.artifacts import save_checkpoint
    p = tmp_path / "bad.pt"
    save_checkpoint(p, "encoder", {"w": torch.zeros(1)}, geometry={}, extra={})
    with pytest.raises(DataError):
        load_vae(p)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        VAETrainConfig(steps=0)
    with pytest.raises(ConfigurationError):
        VAETrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigurationError):
        VAETrainConfig(val_fraction=1.5)
