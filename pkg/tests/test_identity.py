"""Recognition encoder, margin head, and encoder pretraining."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from idinpaint.artifacts import module_hash, save_checkpoint
from idinpaint.errors import ArgumentError, ConfigurationError, DataError, NumericalError
from idinpaint.identity import (
    EncoderGeometry,
    EncoderTrainConfig,
    MarginHead,
    RecognitionEncoder,
    cosine_distance,
    embed,
    evaluate_encoder,
    load_encoder,
    pretrain_encoder,
    save_encoder,
)
from idinpaint.synthfaces import generate_corpus


GEO32 = EncoderGeometry(image_size=32)


def test_geometry_validation():
    with pytest.raises(ConfigurationError):
        EncoderGeometry(image_size=30)
    with pytest.raises(ConfigurationError):
        EncoderGeometry(embedding_dim=0)


def test_embeddings_are_unit_norm(models32):
    g = torch.Generator().manual_seed(0)
    x = torch.rand(5, 3, 32, 32, generator=g) * 2 - 1
    e = models32.encoder(x)
    assert e.shape == (5, 64)
    assert torch.allclose(e.norm(dim=1), torch.ones(5), atol=1e-5)


def test_embed_handles_single_image(models32):
    x = torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(7)) * 2 - 1
    e = embed(x, models32.encoder)
    assert e.shape == (64,)
    assert float(e.norm()) == pytest.approx(1.0, abs=1e-5)


def test_encoder_rejects_nonfinite_input(models32):
    x = torch.full((1, 3, 32, 32), float("nan"))
    with pytest.raises(NumericalError):
        models32.encoder(x)


def test_feature_maps_and_features_shapes(models32):
    x = torch.zeros(2, 3, 32, 32)
    maps = models32.encoder.feature_maps(x)
    assert len(maps) == 4
    sizes = [m.shape[-1] for m in maps]
    assert sizes == [16, 8, 4, 2]
    feats = models32.encoder.features(x)
    assert feats.shape == (2, 128)


def test_extractor_id_tracks_weights():
    a = RecognitionEncoder(GEO32, seed=1)
    b = RecognitionEncoder(GEO32, seed=2)
    assert a.extractor_id != b.extractor_id
    assert a.extractor_id.startswith("recognition-trunk")


def test_cosine_distance_values_and_errors():
    u = torch.tensor([1.0, 0.0])
    v = torch.tensor([0.0, 1.0])
    assert cosine_distance(u, u) == pytest.approx(0.0, abs=1e-6)
    assert cosine_distance(u, v) == pytest.approx(1.0, abs=1e-6)
    assert cosine_distance(u, -u) == pytest.approx(2.0, abs=1e-6)
    with pytest.raises(ArgumentError):
        cosine_distance(u * 2, u)
    with pytest.raises(ArgumentError):
        cosine_distance(u, torch.tensor([1.0, 0.0, 0.0]))


def test_margin_head_penalizes_target_class():
    head = MarginHead(8, n_classes=3, scale=16.0, margin=0.3, seed=0)
    e = torch.nn.functional.normalize(torch.randn(4, 8,
                                      generator=torch.Generator().manual_seed(1)), dim=-1)
    labels = torch.tensor([0, 1, 2, 0])
    with torch.no_grad():
        plain = head(e, labels=None)
        with_margin = head(e, labels=labels)
    rows = torch.arange(4)
    assert torch.all(with_margin[rows, labels] < plain[rows, labels])
    off = torch.ones_like(plain, dtype=torch.bool)
    off[rows, labels] = False
    assert torch.allclose(with_margin[off], plain[off], atol=1e-6)


def test_margin_head_scale_applies():
    head = MarginHead(4, n_classes=2, scale=10.0, margin=0.0, seed=0)
    e = torch.nn.functional.normalize(torch.randn(3, 4,
                                      generator=torch.Generator().manual_seed(2)), dim=-1)
    with torch.no_grad():
        logits = head(e, labels=None)
    assert float(logits.abs().max()) <= 10.0 + 1e-5


@pytest.fixture(scope="module")
def trained_encoder(tmp_path_factory):
    corpus = generate_corpus(tmp_path_factory.mktemp("enc-corpus"), n_identities=4,
                             per_identity=4, size=32, seed=13)
    cfg = EncoderTrainConfig(steps=260, batch_size=8, seed=13)
    encoder, stats = pretrain_encoder(corpus, cfg, geometry=GEO32)
    return corpus, encoder, stats


def test_pretrain_encoder_separates_identities(trained_encoder):
    _, encoder, stats = trained_encoder
    assert stats["n_identities"] == 4
    assert stats["accuracy"] >= 0.75
    assert stats["gap"] > 0.1
    assert all(not p.requires_grad for p in encoder.parameters())


def test_pretrain_encoder_deterministic(trained_encoder):
    corpus, encoder, _ = trained_encoder
    again, _ = pretrain_encoder(corpus, EncoderTrainConfig(steps=260, batch_size=8,
                                                           seed=13), geometry=GEO32)
    assert module_hash(again) == module_hash(encoder)


def test_evaluate_encoder_reports(trained_encoder):
    corpus, encoder, _ = trained_encoder
    from idinpaint.autoencoder import load_corpus_images
    images, identities = load_corpus_images(corpus, 32)
    name_to_label = {n: i for i, n in enumerate(sorted(set(identities)))}
    labels = torch.tensor([name_to_label[n] for n in identities])
    stats = evaluate_encoder(encoder, images, labels)
    assert 0.0 <= stats["accuracy"] <= 1.0
    assert stats["intra_sim"] > stats["inter_sim"]


def test_pretrain_rejects_degenerate_corpora(tmp_path):
    single = generate_corpus(tmp_path / "one", n_identities=1, per_identity=3,
                             size=32, seed=0)
    with pytest.raises(DataError):
        pretrain_encoder(single, EncoderTrainConfig(steps=5, batch_size=4), geometry=GEO32)

    lonely = generate_corpus(tmp_path / "lonely", n_identities=2, per_identity=1,
                             size=32, seed=0)
    with pytest.raises(DataError):
        pretrain_encoder(lonely, EncoderTrainConfig(steps=5, batch_size=4), geometry=GEO32)


def test_save_load_roundtrip(tmp_path, models32):
    p = save_encoder(models32.encoder, tmp_path / "enc.pt")
    back = load_encoder(p)
    x = torch.randn(2, 3, 32, 32, generator=torch.Generator().manual_seed(5))
    with torch.no_grad():
        assert torch.equal(back(x), models32.encoder(x))
    assert back.extractor_id == models32.encoder.extractor_id


def test_load_encoder_kind_check(tmp_path):
    p = tmp_path / "x.pt"
    save_checkpoint(p, "vae", {"w": torch.zeros(1)}, geometry={}, extra={})
    with pytest.raises(DataError):
        load_encoder(p)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        EncoderTrainConfig(batch_size=1)
    with pytest.raises(ConfigurationError):
        EncoderTrainConfig(margin=-0.5)
