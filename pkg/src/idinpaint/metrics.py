"""Distribution and identity metrics for generated face sets.

Features come from the frozen recognition trunk's penultimate layer; the
report records which extractor produced them so numbers are never compared
across different feature spaces. The Frechet distance uses an
eigendecomposition of the symmetrized covariance product (no iterative
matrix square root), with small negative eigenvalues clamped to zero.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import manifest as mio
from .errors import ArgumentError, DataError
from .identity import RecognitionEncoder
from .artifacts import numpy_rng, weights_hash

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class FeatureSet:
    """Extracted features [N, F] plus the identity of their extractor."""

    features: np.ndarray
    extractor_id: str

    def __post_init__(self):
        arr = np.asarray(self.features, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ArgumentError(f"features must be [N, F] with N >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ArgumentError("features contain non-finite values")
        object.__setattr__(self, "features", arr)

    def __len__(self) -> int:
        return self.features.shape[0]


def extract_features(images: torch.Tensor | list[torch.Tensor],
                     extractor: RecognitionEncoder, batch_size: int = 32) -> FeatureSet:
    """Run the extractor over an image stack; returns float64 features."""
    if isinstance(images, list):
        if not images:
            raise ArgumentError("empty image list")
        images = torch.stack(images)
    feats = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            feats.append(extractor.features(images[i:i + batch_size]).double().numpy())
    return FeatureSet(np.concatenate(feats, axis=0), extractor.extractor_id)


def _as_features(x: FeatureSet | np.ndarray) -> np.ndarray:
    if isinstance(x, FeatureSet):
        return x.features
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ArgumentError(f"expected [N, F] feature array, got shape {arr.shape}")
    return arr


def _check_same_space(a, b) -> None:
    if isinstance(a, FeatureSet) and isinstance(b, FeatureSet) \
            and a.extractor_id != b.extractor_id:
        raise ArgumentError(
            f"feature sets come from different extractors: "
            f"{a.extractor_id} vs {b.extractor_id}")


def _sqrt_eigh(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eigendecomposition square root of a symmetric PSD matrix.

    Negative eigenvalues from round-off are clamped to zero.
    """
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return vecs, vals, (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: FeatureSet | np.ndarray, b: FeatureSet | np.ndarray) -> float:
    """Frechet distance between Gaussians fitted to two feature sets.

    d^2 = |mu_a - mu_b|^2 + tr(Sa) + tr(Sb) - 2 tr((Sb^1/2 Sa Sb^1/2)^1/2),
    computed entirely through symmetric eigendecompositions.
    """
    _check_same_space(a, b)
    fa, fb = _as_features(a), _as_features(b)
    if fa.shape[1] != fb.shape[1]:
        raise ArgumentError(f"feature dims differ: {fa.shape[1]} vs {fb.shape[1]}")
    if fa.shape[0] < 2 or fb.shape[0] < 2:
        raise DataError("need at least 2 samples per set to fit a covariance")
    mu_a, mu_b = fa.mean(0), fb.mean(0)
    cov_a = np.cov(fa, rowvar=False)
    cov_b = np.cov(fb, rowvar=False)
    cov_a = np.atleast_2d(cov_a)
    cov_b = np.atleast_2d(cov_b)
    _, _, sqrt_b = _sqrt_eigh(cov_b)
    inner = sqrt_b @ cov_a @ sqrt_b
    vals, _ = np.linalg.eigh((inner + inner.T) / 2.0)
    trace_sqrt = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    diff = mu_a - mu_b
    d2 = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)
    return max(d2, 0.0)


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    f = x.shape[1]
    return (x @ y.T / f + 1.0) ** 3


def _mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m, n = x.shape[0], y.shape[0]
    kxx = _poly_kernel(x, x)
    kyy = _poly_kernel(y, y)
    kxy = _poly_kernel(x, y)
    sum_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    sum_xy = 2.0 * kxy.sum() / (m * n)
    return float(sum_xx + sum_yy - sum_xy)


def _canonical_key(f: np.ndarray) -> tuple:
    return (f.shape[0], hashlib.sha256(np.ascontiguousarray(f).tobytes()).hexdigest())


def kid(a: FeatureSet | np.ndarray, b: FeatureSet | np.ndarray,
        subset_size: int = 100, n_subsets: int = 10, seed: int = 0) -> float:
    """Kernel inception distance: unbiased MMD^2 with kernel (x.y/F + 1)^3.

    Averaged over n_subsets random subsets of each set (without
    replacement, capped at the set size). The two sets are put in a
    canonical order before any computation, making the estimate exactly
    symmetric in its arguments.
    """
    _check_same_space(a, b)
    fa, fb = _as_features(a), _as_features(b)
    if fa.shape[1] != fb.shape[1]:
        raise ArgumentError(f"feature dims differ: {fa.shape[1]} vs {fb.shape[1]}")
    if subset_size < 2 or n_subsets < 1:
        raise ArgumentError("need subset_size >= 2 and n_subsets >= 1")
    if _canonical_key(fb) < _canonical_key(fa):
        fa, fb = fb, fa
    m = min(subset_size, fa.shape[0], fb.shape[0])
    if m < 2:
        raise DataError("need at least 2 samples per set for the MMD estimate")
    vals = []
    for j in range(n_subsets):
        rng = numpy_rng("kid", seed, j)
        ia = rng.choice(fa.shape[0], size=m, replace=False)
        ib = rng.choice(fb.shape[0], size=m, replace=False)
        vals.append(_mmd2_unbiased(fa[ia], fb[ib]))
    return float(np.mean(vals))


def _mask_bbox(mask: torch.Tensor) -> tuple[int, int, int, int] | None:
    rows = torch.any(mask > 0.5, dim=1)
    cols = torch.any(mask > 0.5, dim=0)
    if not bool(rows.any()):
        return None
    r = torch.nonzero(rows).flatten()
    c = torch.nonzero(cols).flatten()
    return int(r[0]), int(r[-1]) + 1, int(c[0]), int(c[-1]) + 1


def _crop_resize(image: torch.Tensor, bbox: tuple[int, int, int, int], size: int) -> torch.Tensor:
    r0, r1, c0, c1 = bbox
    crop = image[:, r0:r1, c0:c1]
    if crop.shape[1] == size and crop.shape[2] == size:
        return crop
    return F.interpolate(crop[None], size=(size, size), mode="bilinear",
                         align_corners=False)[0]


def masked_fid(gen: torch.Tensor, ref: torch.Tensor, masks: torch.Tensor,
               extractor: RecognitionEncoder) -> float:
    """Frechet distance restricted to the inpainted region.

    Every image is cropped to the tight bounding box of its mask and
    resized to the extractor input; pairs with an empty mask are skipped
    with a warning.
    """
    if not (len(gen) == len(ref) == len(masks)):
        raise ArgumentError("gen, ref and masks must have equal length")
    size = extractor.geometry.image_size
    crops_g, crops_r = [], []
    for i in range(len(gen)):
        bbox = _mask_bbox(masks[i])
        if bbox is None:
            log.warning("skipping sample %d in masked FID: empty mask", i)
            continue
        crops_g.append(_crop_resize(gen[i], bbox, size))
        crops_r.append(_crop_resize(ref[i], bbox, size))
    if not crops_g:
        raise DataError("all masks empty; masked FID undefined")
    return frechet_distance(extract_features(torch.stack(crops_g), extractor),
                            extract_features(torch.stack(crops_r), extractor))


def identity_score(gen: torch.Tensor, ref: torch.Tensor,
                   encoder: RecognitionEncoder) -> tuple[list[float], float]:
    """Per-image embedding similarity (dot product) and its mean."""
    if len(gen) != len(ref):
        raise ArgumentError("gen and ref must have equal length")
    if len(gen) == 0:
        raise DataError("no image pairs to score")
    with torch.no_grad():
        e_g = torch.cat([encoder(gen[i:i + 32]) for i in range(0, len(gen), 32)])
        e_r = torch.cat([encoder(ref[i:i + 32]) for i in range(0, len(ref), 32)])
    sims = (e_g * e_r).sum(dim=1)
    return [float(s) for s in sims], float(sims.mean())


def perceptual_distance(gen: torch.Tensor, ref: torch.Tensor,
                        extractor: RecognitionEncoder) -> float:
    """Feature-space reconstruction proxy: mean squared feature-map distance.

    Averages the per-level mean squared difference of the extractor's conv
    activations over all levels and image pairs. A stand-in for a learned
    perceptual metric; usable for relative comparisons under one extractor
    only.
    """
    if len(gen) != len(ref):
        raise ArgumentError("gen and ref must have equal length")
    total, levels = 0.0, 0
    with torch.no_grad():
        maps_g = extractor.feature_maps(gen)
        maps_r = extractor.feature_maps(ref)
    for mg, mr in zip(maps_g, maps_r):
        total += float((mg - mr).pow(2).mean())
        levels += 1
    return total / levels


def identity_grid(mask_manifest: str | Path, vae, encoder: RecognitionEncoder,
                  backbone, branch, sched, region: str = "eyes", n: int = 3,
                  seed: int = 0) -> tuple[torch.Tensor, np.ndarray, list[str]]:
    """Cross-identity inpainting grid.

    Cell (i, j) inpaints the region of identity i's image conditioned on
    identity j's embedding; entry (i, j) of the returned matrix is the
    similarity of that cell to identity j's reference embedding. Returns
    the tiled grid image, the matrix, and the identity names used.
    """
    from .control import make_denoiser
    from .diffusion import sample_inpaint
    from .artifacts import derive_seed

    rows = mio.read_manifest(mask_manifest)
    first_by_id: dict[str, dict] = {}
    for row in rows:
        first_by_id.setdefault(str(row["identity_id"]), row)
    names = sorted(first_by_id)[:n]
    if len(names) < n:
        raise DataError(f"grid needs {n} identities, corpus has {len(first_by_id)}")
    size = vae.geometry.image_size
    images, masks = [], []
    key = f"{region}_mask"
    for name in names:
        row = first_by_id[name]
        images.append(mio.load_image(mio.resolve(mask_manifest, row["image_path"]), size))
        masks.append(mio.load_mask(mio.resolve(mask_manifest, row[key])))
    with torch.no_grad():
        e_ref = torch.stack([encoder(im[None])[0] for im in images])
    denoiser = make_denoiser(backbone, branch)
    sims = np.zeros((n, n))
    grid = torch.zeros(3, n * size, n * size)
    with torch.no_grad():
        for i in range(n):
            for j in range(n):
                cell = sample_inpaint(denoiser, images[i], masks[i], e_ref[j], vae,
                                      sched, seed=derive_seed("grid", seed, i, j))
                e_gen = encoder(cell[None])[0]
                sims[i, j] = float((e_gen * e_ref[j]).sum())
                grid[:, i * size:(i + 1) * size, j * size:(j + 1) * size] = cell
    return grid, sims, names


def evaluate(gen_dir: str | Path, ref_manifest: str | Path,
             encoder: RecognitionEncoder, region: str = "eyes",
             kid_subset_size: int = 100, kid_subsets: int = 10,
             out_path: str | Path | None = None) -> dict:
    """Score a directory of generated images against the reference corpus.

    Generated files are matched to manifest rows by image stem; rows
    without a generated file are listed under "missing" and skipped. The
    report is JSON-serializable and stable across identical runs.
    """
    gen_dir = Path(gen_dir)
    if not gen_dir.is_dir():
        raise DataError(f"generated image directory not found: {gen_dir}")
    rows = mio.read_manifest(ref_manifest)
    size = encoder.geometry.image_size
    gen_list, ref_list, mask_list, stems, missing = [], [], [], [], []
    mask_key = f"{region}_mask"
    for row in rows:
        ref_path = mio.resolve(ref_manifest, row["image_path"])
        gen_path = gen_dir / ref_path.name
        if not gen_path.is_file():
            missing.append(ref_path.name)
            continue
        gen_list.append(mio.load_image(gen_path, size))
        ref_list.append(mio.load_image(ref_path, size))
        stems.append(ref_path.stem)
        if mask_key in row:
            mask_list.append(mio.load_mask(mio.resolve(ref_manifest, row[mask_key])))
    if not gen_list:
        raise DataError(f"no generated images in {gen_dir} match the manifest")
    gen_t, ref_t = torch.stack(gen_list), torch.stack(ref_list)
    per_image, mean_sim = identity_score(gen_t, ref_t, encoder)
    feats_g = extract_features(gen_t, encoder)
    feats_r = extract_features(ref_t, encoder)
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "counts": {"scored": len(stems), "missing": len(missing),
                   "manifest_rows": len(rows)},
        "extractor": {"id": encoder.extractor_id,
                      "weights_sha256": weights_hash(encoder.state_dict())},
        "identity_similarity": {
            "mean": mean_sim,
            "std": float(np.std(np.asarray(per_image))),
            "per_image": {s: v for s, v in zip(stems, per_image)},
        },
        "fid": frechet_distance(feats_g, feats_r),
        "kid": kid(feats_g, feats_r, subset_size=kid_subset_size, n_subsets=kid_subsets),
        "perceptual": perceptual_distance(gen_t, ref_t, encoder),
        "missing": sorted(missing),
        "region": region,
    }
    if mask_list and len(mask_list) == len(gen_list):
        report["masked_fid"] = masked_fid(gen_t, ref_t, torch.stack(mask_list), encoder)
    else:
        report["masked_fid"] = None
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return report
