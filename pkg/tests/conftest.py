"""Shared fixtures: a tiny rendered corpus plus small frozen models.

The corpus is rendered at 32 px so the full pipeline stays cheap; the
models are seeded but untrained, which is all most API tests need.
Tests that require trained behaviour train their own short runs.
"""

from __future__ import annotations

import dataclasses

import pytest
import torch

from idinpaint.autoencoder import ConvVAE, VAEGeometry
from idinpaint.control import BackboneDenoiser, BackboneGeometry, ControlBranch, ControlGeometry
from idinpaint.emask import build_dataset
from idinpaint.identity import EncoderGeometry, RecognitionEncoder
from idinpaint.nets import freeze
from idinpaint.synthfaces import generate_corpus


@dataclasses.dataclass
class SmallModels:
    vae: ConvVAE
    encoder: RecognitionEncoder
    backbone: BackboneDenoiser
    image_size: int = 32
    latent_size: int = 8


ACCEPTANCE_LINES: list[str] = []
"""Verdict lines collected by the acceptance tests, echoed after the run."""


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.line(line)


@pytest.fixture(scope="session")
def corpus32(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus32")
    return generate_corpus(out, n_identities=4, per_identity=3, size=32, seed=3)


@pytest.fixture(scope="session")
def masks32(corpus32, tmp_path_factory):
    out = tmp_path_factory.mktemp("masks32")
    return build_dataset(corpus32, out)


@pytest.fixture(scope="session")
def models32() -> SmallModels:
    vae = ConvVAE(VAEGeometry(image_size=32), seed=11)
    encoder = RecognitionEncoder(EncoderGeometry(image_size=32), seed=12)
    backbone = BackboneDenoiser(BackboneGeometry(latent_size=8), seed=13)
    for m in (vae, encoder, backbone):
        freeze(m)
    return SmallModels(vae=vae, encoder=encoder, backbone=backbone)


@pytest.fixture()
def branch32() -> ControlBranch:
    return ControlBranch(ControlGeometry(latent_size=8), seed=14)


@pytest.fixture(scope="session")
def unit_vectors():
    def make(n: int, dim: int = 64, seed: int = 0) -> torch.Tensor:
        g = torch.Generator().manual_seed(seed)
        e = torch.randn(n, dim, generator=g, dtype=torch.float64)
        return torch.nn.functional.normalize(e, dim=-1)

    return make
