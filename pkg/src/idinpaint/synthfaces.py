"""Procedural face corpus with identity structure and dense landmarks.

Faces are flat-shaded ellipse compositions. Identity is a bundle of
geometry and color parameters held fixed across a subject's samples;
per-sample nuisance factors (pose jitter, brightness, background, mouth
color) vary freely. Iris color is drawn independently of every other
parameter and is the strongest identity cue, so occluding the eyes removes
evidence that nothing else in the image can stand in for. Mouth color is
resampled per image, leaving the mouth with geometry cues only.

Every image ships with a 468-point landmark set whose region index subsets
line up with the rendered eyes, nose and mouth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import manifest as mio
from .artifacts import numpy_rng
from .emask import DEFAULT_PROFILE, _REGION_TABLE
from .errors import ArgumentError


@dataclass(frozen=True)
class IdentitySpec:
    """Per-subject parameters, constant across that subject's samples."""

    face_color: tuple[float, float, float]
    face_rx: float
    face_ry: float
    eye_y: float
    eye_dx: float
    eye_rx: float
    eye_aspect: float
    iris_color: tuple[float, float, float]
    sclera: float
    nose_w: float
    nose_h: float
    nose_shade: float
    mouth_y: float
    mouth_w: float
    mouth_h: float


@dataclass(frozen=True)
class SampleSpec:
    """Per-image nuisance parameters."""

    dx: float
    dy: float
    scale: float
    brightness: float
    background: tuple[float, float, float]
    mouth_color: tuple[float, float, float]


def sample_identity(rng: np.random.Generator) -> IdentitySpec:
    u = rng.uniform
    return IdentitySpec(
        face_color=(u(0.45, 0.85), u(0.30, 0.70), u(0.20, 0.60)),
        face_rx=u(0.30, 0.36),
        face_ry=u(0.38, 0.44),
        eye_y=u(0.38, 0.42),
        eye_dx=u(0.13, 0.17),
        eye_rx=u(0.050, 0.065),
        eye_aspect=u(0.55, 0.75),
        iris_color=(u(0.05, 0.95), u(0.05, 0.95), u(0.05, 0.95)),
        sclera=u(0.90, 1.00),
        nose_w=u(0.05, 0.09),
        nose_h=u(0.10, 0.16),
        nose_shade=u(0.55, 0.80),
        mouth_y=u(0.73, 0.77),
        mouth_w=u(0.10, 0.16),
        mouth_h=u(0.030, 0.050),
    )


def sample_nuisance(rng: np.random.Generator) -> SampleSpec:
    u = rng.uniform
    return SampleSpec(
        dx=u(-0.015, 0.015),
        dy=u(-0.015, 0.015),
        scale=u(0.97, 1.03),
        brightness=u(0.92, 1.08),
        background=(u(0.05, 0.35), u(0.05, 0.35), u(0.05, 0.35)),
        mouth_color=(u(0.40, 0.90), u(0.10, 0.30), u(0.15, 0.35)),
    )


def _warp(x: float, y: float, s: SampleSpec) -> tuple[float, float]:
    return (0.5 + (x - 0.5) * s.scale + s.dx,
            0.5 + (y - 0.5) * s.scale + s.dy)


class _Geometry:
    """Absolute normalized coordinates for one rendered face."""

    def __init__(self, ident: IdentitySpec, samp: SampleSpec):
        sc = samp.scale
        self.face_c = _warp(0.5, 0.52, samp)
        self.face_r = (ident.face_rx * sc, ident.face_ry * sc)
        self.eye_l = _warp(0.5 - ident.eye_dx, ident.eye_y, samp)
        self.eye_r = _warp(0.5 + ident.eye_dx, ident.eye_y, samp)
        self.eye_rad = (ident.eye_rx * sc, ident.eye_rx * ident.eye_aspect * sc)
        self.iris_rad = (self.eye_rad[0] * 0.55, self.eye_rad[1] * 0.85)
        self.nose_c = _warp(0.5, 0.575, samp)
        self.nose_r = (ident.nose_w * sc / 2.0, ident.nose_h * sc / 2.0)
        self.mouth_c = _warp(0.5, ident.mouth_y, samp)
        self.mouth_r = (ident.mouth_w * sc / 2.0, ident.mouth_h * sc)


def _paint_ellipse(img: np.ndarray, grid: tuple[np.ndarray, np.ndarray],
                   center: tuple[float, float], radii: tuple[float, float],
                   color, size: int) -> None:
    xs, ys = grid
    d = np.sqrt(((xs - center[0]) / radii[0]) ** 2 + ((ys - center[1]) / radii[1]) ** 2)
    soft = min(radii) * size
    alpha = np.clip((1.0 - d) * soft, 0.0, 1.0)[..., None]
    img += alpha * (np.asarray(color, dtype=np.float64) - img)


def render_face(ident: IdentitySpec, samp: SampleSpec, size: int = 64) -> torch.Tensor:
    """Rasterize one face as a [3, size, size] tensor in [-1, 1]."""
    if size < 16:
        raise ArgumentError(f"image size too small to render a face: {size}")
    geo = _Geometry(ident, samp)
    idx = (np.arange(size, dtype=np.float64) + 0.5) / size
    xs, ys = np.meshgrid(idx, idx)
    grid = (xs, ys)
    img = np.empty((size, size, 3), dtype=np.float64)
    img[...] = np.asarray(samp.background)
    _paint_ellipse(img, grid, geo.face_c, geo.face_r, ident.face_color, size)
    sclera = (ident.sclera,) * 3
    for eye_c in (geo.eye_l, geo.eye_r):
        _paint_ellipse(img, grid, eye_c, geo.eye_rad, sclera, size)
        _paint_ellipse(img, grid, eye_c, geo.iris_rad, ident.iris_color, size)
    nose_color = tuple(c * ident.nose_shade for c in ident.face_color)
    _paint_ellipse(img, grid, geo.nose_c, geo.nose_r, nose_color, size)
    _paint_ellipse(img, grid, geo.mouth_c, geo.mouth_r, samp.mouth_color, size)
    img = np.clip(img * samp.brightness, 0.0, 1.0)
    return torch.from_numpy((img * 2.0 - 1.0).transpose(2, 0, 1).astype(np.float32))


def _ring(center: tuple[float, float], radii: tuple[float, float], n: int,
          shrink: float = 1.0) -> np.ndarray:
    ang = 2.0 * math.pi * np.arange(n) / n
    x = center[0] + radii[0] * shrink * np.cos(ang)
    y = center[1] + radii[1] * shrink * np.sin(ang)
    return np.stack([x, y, np.zeros(n)], axis=1)


def face_landmarks(ident: IdentitySpec, samp: SampleSpec) -> np.ndarray:
    """468-point landmark array consistent with the rendered geometry."""
    geo = _Geometry(ident, samp)
    pts = np.zeros((DEFAULT_PROFILE, 3), dtype=np.float64)
    filled = np.zeros(DEFAULT_PROFILE, dtype=bool)

    def place(indices: list[int], ring: np.ndarray) -> None:
        pts[indices] = ring
        filled[indices] = True

    right = _REGION_TABLE["right_eye"]
    left = _REGION_TABLE["left_eye"]
    place(right, _ring(geo.eye_l, geo.eye_rad, len(right)))
    place(left, _ring(geo.eye_r, geo.eye_rad, len(left)))
    place(_REGION_TABLE["nose"], _ring(geo.nose_c, geo.nose_r, len(_REGION_TABLE["nose"])))
    place(_REGION_TABLE["mouth"], _ring(geo.mouth_c, geo.mouth_r, len(_REGION_TABLE["mouth"])))
    rest = np.flatnonzero(~filled)
    shrinks = (1.0, 0.85, 0.7, 0.55)
    per = math.ceil(len(rest) / len(shrinks))
    for k, shrink in enumerate(shrinks):
        chunk = rest[k * per:(k + 1) * per]
        if len(chunk):
            pts[chunk] = _ring(geo.face_c, geo.face_r, len(chunk), shrink)
    np.clip(pts[:, :2], 0.0, 1.0, out=pts[:, :2])
    return pts


def generate_corpus(out_dir: str | Path, n_identities: int, per_identity: int,
                    size: int = 64, seed: int = 0) -> Path:
    """Write images, landmarks and a corpus manifest; returns manifest path.

    Fully determined by the arguments: the same call produces byte-identical
    files. Images land in out_dir/images, landmarks in out_dir/landmarks.
    """
    if n_identities < 1 or per_identity < 1:
        raise ArgumentError("need at least one identity and one sample each")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "landmarks").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n_identities):
        ident = sample_identity(numpy_rng("identity", seed, i))
        identity_id = f"id{i:03d}"
        for j in range(per_identity):
            samp = sample_nuisance(numpy_rng("sample", seed, i, j))
            stem = f"{identity_id}_s{j:02d}"
            image = render_face(ident, samp, size=size)
            mio.save_image(image, out_dir / "images" / f"{stem}.png")
            mio.save_landmarks(face_landmarks(ident, samp),
                               out_dir / "landmarks" / f"{stem}.json")
            rows.append({
                "image_path": f"images/{stem}.png",
                "identity_id": identity_id,
                "landmark_path": f"landmarks/{stem}.json",
            })
    return mio.write_manifest(out_dir / "corpus.jsonl", rows)
