"""Composite training objective: denoising MSE, identity consistency, batch triplet.

All three losses are pure tensor functions (no parameters, no state) and
keep gradients intact so they can sit on top of the single-step proxy path.
Embeddings are expected unit-norm on entry; re-normalization is the
embedding boundary's job, never done inside a loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ArgumentError, NumericalError

_UNIT_ATOL = 1e-4


@dataclass(frozen=True)
class LossWeights:
    """Weights for the composite objective. Defaults are config knobs, not ground truth."""

    lambda_id: float = 0.1
    lambda_trip: float = 0.05
    margin: float = 0.3

    def __post_init__(self):
        for name in ("lambda_id", "lambda_trip", "margin"):
            v = float(getattr(self, name))
            if not (v >= 0.0 and v == v and v != float("inf")):
                raise ArgumentError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term values of one objective evaluation; total = denoise + w_id*id + w_trip*triplet."""

    denoise: float
    id: float
    triplet: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {"denoise": self.denoise, "id": self.id,
                "triplet": self.triplet, "total": self.total}


def _check_unit(e: torch.Tensor, name: str) -> None:
    norms = e.norm(dim=-1)
    if torch.any((norms - 1.0).abs() > _UNIT_ATOL):
        raise ArgumentError(f"{name} must be unit-norm (max deviation "
                            f"{float((norms - 1.0).abs().max()):.2e})")


def _batched(e: torch.Tensor, name: str) -> torch.Tensor:
    if e.ndim == 1:
        e = e[None]
    if e.ndim != 2:
        raise ArgumentError(f"{name} must be [N, D] or [D], got shape {tuple(e.shape)}")
    return e


def denoise_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and predicted noise, over all elements."""
    if eps.shape != eps_hat.shape:
        raise ArgumentError(f"shape mismatch {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return (eps - eps_hat).pow(2).mean()


def cosine_distance_rows(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine distance 1 - u.v for unit-norm rows."""
    return 1.0 - (u * v).sum(dim=-1)


def id_loss(e_gen: torch.Tensor, e_cond: torch.Tensor) -> torch.Tensor:
    """Mean cosine distance between generated and conditioning embeddings."""
    e_gen = _batched(e_gen, "e_gen")
    e_cond = _batched(e_cond, "e_cond")
    if e_gen.shape != e_cond.shape:
        raise ArgumentError(f"batch mismatch {tuple(e_gen.shape)} vs {tuple(e_cond.shape)}")
    if e_gen.shape[0] == 0:
        raise ArgumentError("empty batch")
    _check_unit(e_gen, "e_gen")
    _check_unit(e_cond, "e_cond")
    return cosine_distance_rows(e_gen, e_cond).mean()


def triplet_loss(e_gen: torch.Tensor, e_pos: torch.Tensor, e_neg: torch.Tensor,
                 margin: float) -> torch.Tensor:
    """Batch hinge loss max(0, d(gen,pos) - d(gen,neg) + margin), averaged.

    The subgradient at the hinge kink is 0 (plain max convention).
    """
    e_gen = _batched(e_gen, "e_gen")
    e_pos = _batched(e_pos, "e_pos")
    e_neg = _batched(e_neg, "e_neg")
    if not (e_gen.shape == e_pos.shape == e_neg.shape):
        raise ArgumentError("e_gen, e_pos, e_neg must share one [B, D] shape")
    if e_gen.shape[0] == 0:
        raise ArgumentError("empty batch")
    for e, name in ((e_gen, "e_gen"), (e_pos, "e_pos"), (e_neg, "e_neg")):
        _check_unit(e, name)
    d_pos = cosine_distance_rows(e_gen, e_pos)
    d_neg = cosine_distance_rows(e_gen, e_neg)
    return torch.clamp(d_pos - d_neg + margin, min=0.0).mean()


def total_loss(denoise: torch.Tensor | float, id_term: torch.Tensor | float,
               triplet: torch.Tensor | float, weights: LossWeights) -> LossBreakdown:
    """Weighted sum of the three terms, returned with all components for logging.

    With lambda_id = lambda_trip = 0 this is exactly the plain denoising
    objective. Raises on non-finite components.
    """
    parts = {"denoise": denoise, "id": id_term, "triplet": triplet}
    vals = {}
    for name, v in parts.items():
        f = float(v.detach() if isinstance(v, torch.Tensor) else v)
        if f != f or f in (float("inf"), float("-inf")):
            raise NumericalError(f"non-finite {name} loss: {f}")
        vals[name] = f
    total = vals["denoise"] + weights.lambda_id * vals["id"] + weights.lambda_trip * vals["triplet"]
    return LossBreakdown(denoise=vals["denoise"], id=vals["id"],
                         triplet=vals["triplet"], total=total)


def total_loss_tensor(denoise: torch.Tensor, id_term: torch.Tensor, triplet: torch.Tensor,
                      weights: LossWeights) -> torch.Tensor:
    """Same weighted sum kept as a tensor, for the backward pass."""
    return denoise + weights.lambda_id * id_term + weights.lambda_trip * triplet
