"""Synthetic face corpus: rendering, landmarks, and on-disk layout."""

from __future__ import annotations

import hashlib

import numpy as np
import torch

from idinpaint.artifacts import numpy_rng
from idinpaint.emask import FaceLandmarks, region_box
from idinpaint.manifest import load_image, load_landmarks, read_manifest, resolve
from idinpaint.synthfaces import (
    face_landmarks,
    generate_corpus,
    render_face,
    sample_identity,
    sample_nuisance,
)


def test_render_face_range_and_shape():
    rng = numpy_rng("t", 0)
    img = render_face(sample_identity(rng), sample_nuisance(rng), size=64)
    assert img.shape == (3, 64, 64)
    assert float(img.min()) >= -1.0 and float(img.max()) <= 1.0
    assert float(img.std()) > 0.01


def test_render_is_deterministic_given_specs():
    rng = numpy_rng("t", 1)
    ident, samp = sample_identity(rng), sample_nuisance(rng)
    assert torch.equal(render_face(ident, samp), render_face(ident, samp))


def test_landmarks_are_valid_profile():
    rng = numpy_rng("t", 2)
    pts = face_landmarks(sample_identity(rng), sample_nuisance(rng))
    assert pts.shape == (468, 3)
    assert np.isfinite(pts).all()
    assert (pts[:, :2] >= 0.0).all() and (pts[:, :2] <= 1.0).all()
    # they must satisfy the strict landmark container used downstream
    FaceLandmarks(points=pts)


def test_landmarks_track_rendered_iris():
    """The eye region box must cover pixels painted in the iris color."""
    rng = numpy_rng("t", 3)
    ident, samp = sample_identity(rng), sample_nuisance(rng)
    img = render_face(ident, samp, size=64).numpy()
    lm = FaceLandmarks(points=face_landmarks(ident, samp))
    box = region_box(lm, "eyes", (64, 64), pad_frac=0.0)
    iris = np.asarray(ident.iris_color, dtype=np.float32) * 2.0 - 1.0
    region = img[:, box.y0:box.y1, box.x0:box.x1]
    dist = np.abs(region - iris[:, None, None]).sum(axis=0)
    assert dist.size > 0 and float(dist.min()) < 0.1


def test_separate_identities_have_distinct_parameters():
    a = sample_identity(numpy_rng("identity", 0, 0))
    b = sample_identity(numpy_rng("identity", 0, 1))
    assert a.iris_color != b.iris_color
    assert a.face_color != b.face_color


def _tree_digest(manifest_path):
    rows = read_manifest(manifest_path)
    h = hashlib.sha256()
    for row in rows:
        for key in sorted(row):
            h.update(key.encode())
            val = row[key]
            h.update(str(val).encode())
            if key.endswith("_path"):
                h.update(resolve(manifest_path, val).read_bytes())
    return h.hexdigest()


def test_generate_corpus_layout_and_determinism(tmp_path):
    m1 = generate_corpus(tmp_path / "c1", n_identities=3, per_identity=2, size=32, seed=5)
    m2 = generate_corpus(tmp_path / "c2", n_identities=3, per_identity=2, size=32, seed=5)
    m3 = generate_corpus(tmp_path / "c3", n_identities=3, per_identity=2, size=32, seed=6)

    rows = read_manifest(m1)
    assert len(rows) == 6
    ids = {r["identity_id"] for r in rows}
    assert len(ids) == 3
    for row in rows:
        img = load_image(resolve(m1, row["image_path"]), 32)
        assert img.shape == (3, 32, 32)
        pts = load_landmarks(resolve(m1, row["landmark_path"]))
        assert pts.shape == (468, 3)

    assert _tree_digest(m1) == _tree_digest(m2)
    assert _tree_digest(m1) != _tree_digest(m3)


def test_same_identity_varies_across_samples(tmp_path):
    m = generate_corpus(tmp_path / "c", n_identities=1, per_identity=3, size=32, seed=9)
    rows = read_manifest(m)
    imgs = [load_image(resolve(m, r["image_path"]), 32) for r in rows]
    assert not torch.equal(imgs[0], imgs[1])
    assert not torch.equal(imgs[1], imgs[2])
