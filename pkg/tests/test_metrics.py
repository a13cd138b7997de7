"""Distribution metrics: Frechet distance, KID, masked variants, reports."""

from __future__ import annotations

import json
import math

import numpy as np
import pytest
import torch

from idinpaint.errors import ArgumentError, DataError
from idinpaint.metrics import (
    FeatureSet,
    evaluate,
    extract_features,
    frechet_distance,
    identity_score,
    kid,
    masked_fid,
    perceptual_distance,
)

from oracles import fid_oracle_sqrtm, mmd2_oracle


def _gauss(n, f, seed, mean=0.0, scale=1.0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, f)) * scale + mean


# --------------------------------------------------------------------- FID


def test_fid_self_distance_is_zero():
    fa = _gauss(300, 8, 0)
    assert frechet_distance(fa, fa) <= 1e-6


def test_fid_one_dimensional_analytic_case():
    """Sample stats exactly (0,1) and (1,2) give the closed-form value 2.0."""
    x = math.sqrt(0.5)
    a = np.array([[-x], [x]])
    y = math.sqrt(2.0)
    b = np.array([[1.0 - y], [1.0 + y]])
    assert abs(np.cov(a, rowvar=False) - 1.0) < 1e-12
    assert abs(np.cov(b, rowvar=False) - 4.0) < 1e-12
    got = frechet_distance(a, b)
    assert got == pytest.approx(2.0, abs=1e-6)


def test_fid_matches_dense_sqrtm_oracle():
    fa = _gauss(400, 12, 1)
    fb = _gauss(400, 12, 2, mean=0.3, scale=1.4)
    got = frechet_distance(fa, fb)
    want = fid_oracle_sqrtm(fa, fb)
    assert got == pytest.approx(want, abs=1e-4)


def test_fid_symmetry_and_permutation_invariance():
    fa = _gauss(120, 6, 3)
    fb = _gauss(150, 6, 4, mean=0.5)
    assert frechet_distance(fa, fb) == pytest.approx(frechet_distance(fb, fa), abs=1e-8)
    perm = np.random.default_rng(5).permutation(len(fa))
    assert frechet_distance(fa[perm], fb) == pytest.approx(frechet_distance(fa, fb),
                                                           abs=1e-10)


def test_fid_grows_with_mean_shift():
    fa = _gauss(300, 4, 6)
    near = frechet_distance(fa, _gauss(300, 4, 7, mean=0.1))
    far = frechet_distance(fa, _gauss(300, 4, 8, mean=2.0))
    assert far > near


def test_fid_needs_two_samples():
    with pytest.raises(DataError):
        frechet_distance(_gauss(1, 4, 0), _gauss(10, 4, 1))


# --------------------------------------------------------------------- KID


def test_kid_matches_naive_mmd_oracle():
    fa = _gauss(40, 5, 10)
    fb = _gauss(40, 5, 11, mean=0.4)
    got = kid(fa, fb, subset_size=40, n_subsets=1, seed=0)
    want = mmd2_oracle(fa, fb)
    assert got == pytest.approx(want, abs=1e-9)


def test_kid_is_exactly_symmetric():
    fa = _gauss(60, 5, 12)
    fb = _gauss(45, 5, 13, mean=0.2)
    assert kid(fa, fb, subset_size=30, n_subsets=5, seed=3) == \
        kid(fb, fa, subset_size=30, n_subsets=5, seed=3)


def test_kid_seed_controls_subsets():
    fa = _gauss(80, 5, 14)
    fb = _gauss(80, 5, 15)
    a = kid(fa, fb, subset_size=20, n_subsets=3, seed=0)
    b = kid(fa, fb, subset_size=20, n_subsets=3, seed=0)
    c = kid(fa, fb, subset_size=20, n_subsets=3, seed=1)
    assert a == b
    assert a != c


def test_kid_subset_size_capped_at_set_size():
    fa = _gauss(12, 4, 16)
    fb = _gauss(9, 4, 17)
    val = kid(fa, fb, subset_size=100, n_subsets=2, seed=0)
    assert np.isfinite(val)


def test_kid_argument_validation():
    fa = _gauss(10, 4, 18)
    with pytest.raises(ArgumentError):
        kid(fa, _gauss(10, 5, 19))
    with pytest.raises(ArgumentError):
        kid(fa, fa, subset_size=1)


# ------------------------------------------------------------ feature sets


def test_feature_set_validation():
    FeatureSet(features=np.zeros((3, 4)), extractor_id="x")
    with pytest.raises(ArgumentError):
        FeatureSet(features=np.zeros((3,)), extractor_id="x")
    with pytest.raises(ArgumentError):
        FeatureSet(features=np.full((3, 4), np.nan), extractor_id="x")


def test_extractor_space_mismatch_rejected():
    a = FeatureSet(features=np.zeros((10, 4)), extractor_id="enc-a")
    b = FeatureSet(features=np.zeros((10, 4)), extractor_id="enc-b")
    with pytest.raises(ArgumentError):
        frechet_distance(a, b)
    with pytest.raises(ArgumentError):
        kid(a, b)


def test_extract_features_uses_trunk(models32):
    g = torch.Generator().manual_seed(0)
    images = torch.rand(5, 3, 32, 32, generator=g) * 2 - 1
    fs = extract_features(images, models32.encoder, batch_size=2)
    assert fs.features.shape == (5, 128)
    assert fs.features.dtype == np.float64
    assert fs.extractor_id == models32.encoder.extractor_id


# ------------------------------------------------------------- masked FID


def test_masked_fid_full_mask_equals_plain_fid(models32):
    g = torch.Generator().manual_seed(1)
    gen = torch.rand(8, 3, 32, 32, generator=g) * 2 - 1
    ref = torch.rand(8, 3, 32, 32, generator=g) * 2 - 1
    masks = torch.ones(8, 32, 32)
    whole = frechet_distance(extract_features(gen, models32.encoder),
                             extract_features(ref, models32.encoder))
    cropped = masked_fid(gen, ref, masks, models32.encoder)
    assert cropped == pytest.approx(whole, abs=1e-9)


def test_masked_fid_skips_empty_masks(models32, caplog):
    import logging
    g = torch.Generator().manual_seed(2)
    gen = torch.rand(6, 3, 32, 32, generator=g) * 2 - 1
    ref = torch.rand(6, 3, 32, 32, generator=g) * 2 - 1
    masks = torch.zeros(6, 32, 32)
    masks[:4, 8:20, 8:24] = 1.0
    with caplog.at_level(logging.WARNING, logger="idinpaint.metrics"):
        val = masked_fid(gen, ref, masks, models32.encoder)
    assert np.isfinite(val)
    assert "empty mask" in caplog.text

    with pytest.raises(DataError):
        masked_fid(gen, ref, torch.zeros(6, 32, 32), models32.encoder)


def test_masked_fid_responds_to_region_content(models32):
    """Identical images except inside the mask: masked FID sees the change."""
    g = torch.Generator().manual_seed(3)
    ref = torch.rand(10, 3, 32, 32, generator=g) * 2 - 1
    gen = ref.clone()
    gen[:, :, 10:22, 10:22] = -gen[:, :, 10:22, 10:22]
    masks = torch.zeros(10, 32, 32)
    masks[:, 10:22, 10:22] = 1.0
    same = masked_fid(ref, ref, masks, models32.encoder)
    changed = masked_fid(gen, ref, masks, models32.encoder)
    assert changed > same + 1e-6


# ----------------------------------------------------- identity/perceptual


def test_identity_score_self_is_one(models32):
    g = torch.Generator().manual_seed(4)
    imgs = torch.rand(4, 3, 32, 32, generator=g) * 2 - 1
    per_image, mean = identity_score(imgs, imgs, models32.encoder)
    assert len(per_image) == 4
    assert mean == pytest.approx(1.0, abs=1e-6)
    assert all(s == pytest.approx(1.0, abs=1e-6) for s in per_image)


def test_identity_score_orders_similarity(models32):
    g = torch.Generator().manual_seed(5)
    ref = torch.rand(4, 3, 32, 32, generator=g) * 2 - 1
    noisy = (ref + 0.05 * torch.randn(ref.shape, generator=g)).clamp(-1, 1)
    other = torch.rand(4, 3, 32, 32, generator=g) * 2 - 1
    _, near = identity_score(noisy, ref, models32.encoder)
    _, far = identity_score(other, ref, models32.encoder)
    assert near > far


def test_perceptual_distance_zero_on_identical(models32):
    g = torch.Generator().manual_seed(6)
    imgs = torch.rand(3, 3, 32, 32, generator=g) * 2 - 1
    assert perceptual_distance(imgs, imgs, models32.encoder) == 0.0
    jittered = (imgs + 0.1 * torch.randn(imgs.shape, generator=g)).clamp(-1, 1)
    assert perceptual_distance(jittered, imgs, models32.encoder) > 0.0


# ------------------------------------------------------------------ report


@pytest.fixture(scope="module")
def eval_setup(masks32, models32, tmp_path_factory):
    from idinpaint.manifest import load_image, read_manifest, resolve, save_image
    gen_dir = tmp_path_factory.mktemp("gen")
    rows = read_manifest(masks32)
    g = torch.Generator().manual_seed(7)
    for row in rows[:-1]:  # leave the last row missing on purpose
        img = load_image(resolve(masks32, row["image_path"]), 32)
        noisy = (img + 0.1 * torch.randn(img.shape, generator=g)).clamp(-1, 1)
        stem = resolve(masks32, row["image_path"]).stem
        save_image(noisy, gen_dir / f"{stem}.png")
    return gen_dir, rows


def test_evaluate_report_contents(eval_setup, masks32, models32, tmp_path):
    gen_dir, rows = eval_setup
    out = tmp_path / "report.json"
    report = evaluate(gen_dir, masks32, models32.encoder, region="eyes",
                      kid_subset_size=8, kid_subsets=3, out_path=out)
    assert report["schema_version"] == 1
    assert report["counts"]["scored"] == len(rows) - 1
    assert len(report["missing"]) == 1
    assert report["extractor"]["id"] == models32.encoder.extractor_id
    assert np.isfinite(report["fid"])
    assert np.isfinite(report["kid"])
    assert np.isfinite(report["perceptual"])
    assert report["masked_fid"] is None or np.isfinite(report["masked_fid"])
    sims = report["identity_similarity"]
    assert len(sims["per_image"]) == report["counts"]["scored"]
    assert -1.0 <= sims["mean"] <= 1.0
    on_disk = json.loads(out.read_text())
    assert on_disk == report


def test_evaluate_reruns_byte_identical(eval_setup, masks32, models32, tmp_path):
    gen_dir, _ = eval_setup
    p1, p2 = tmp_path / "r1.json", tmp_path / "r2.json"
    evaluate(gen_dir, masks32, models32.encoder, kid_subset_size=8,
             kid_subsets=3, out_path=p1)
    evaluate(gen_dir, masks32, models32.encoder, kid_subset_size=8,
             kid_subsets=3, out_path=p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_evaluate_missing_dir(masks32, models32, tmp_path):
    with pytest.raises(DataError):
        evaluate(tmp_path / "nope", masks32, models32.encoder)
