"""Identity-conditioned latent-diffusion face inpainting at desk scale."""

from .autoencoder import ConvVAE, VAEGeometry, VAETrainConfig, train_autoencoder
from .control import (BackboneDenoiser, BackboneGeometry, ControlBranch, ControlGeometry,
                      denoise_conditioned, make_denoiser, project_embedding)
from .diffusion import (NoiseSchedule, forward_diffuse, make_schedule, mask_to_latent,
                        predict_x0, reverse_step, sample_inpaint, sample_latent)
from .emask import (FaceLandmarks, RegionBox, analyze_suppression, build_dataset,
                    region_box, resolve_overlaps, rasterize)
from .errors import (ArgumentError, ConfigurationError, DataError, GeometryError,
                     IdInpaintError, NumericalError)
from .identity import RecognitionEncoder, cosine_distance, embed, pretrain_encoder
from .losses import LossBreakdown, LossWeights, denoise_loss, id_loss, total_loss, triplet_loss
from .metrics import (FeatureSet, extract_features, frechet_distance, identity_score,
                      kid, masked_fid, evaluate)
from .synthfaces import generate_corpus
from .trainer import TrainConfig, build_batch, pretrain_backbone, train, train_step

__version__ = "0.1.0"

__all__ = [
    "ArgumentError", "BackboneDenoiser", "BackboneGeometry", "ConfigurationError",
    "ControlBranch", "ControlGeometry", "ConvVAE", "DataError", "FaceLandmarks",
    "FeatureSet", "GeometryError", "IdInpaintError", "LossBreakdown", "LossWeights",
    "NoiseSchedule", "NumericalError", "RecognitionEncoder", "RegionBox", "TrainConfig",
    "VAEGeometry", "VAETrainConfig", "analyze_suppression", "build_batch", "build_dataset",
    "cosine_distance", "denoise_conditioned", "denoise_loss", "embed", "evaluate",
    "extract_features", "forward_diffuse", "frechet_distance", "generate_corpus",
    "id_loss", "identity_score", "kid", "make_denoiser", "make_schedule", "mask_to_latent",
    "masked_fid", "predict_x0", "pretrain_backbone", "pretrain_encoder",
    "project_embedding", "rasterize", "region_box", "resolve_overlaps", "reverse_step",
    "sample_inpaint", "sample_latent", "total_loss", "train", "train_autoencoder",
    "train_step", "triplet_loss",
]
