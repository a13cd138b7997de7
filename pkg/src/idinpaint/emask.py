"""Landmark-driven rectangular masks over semantic face regions.

Each face image comes with a dense landmark set in normalized coordinates.
Region boxes are tight axis-aligned bounds over a fixed landmark index
subset per region; the eye box is additionally padded by a fraction of the
inter-ocular distance. Overlaps between the three regions are resolved by
clipping the lower-priority box (eyes > nose > mouth), and the final boxes
are rasterized to binary PNG masks with a half-open pixel convention.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import manifest as mio
from .errors import ArgumentError, DataError, GeometryError

REGIONS = ("eyes", "nose", "mouth")
DEFAULT_PAD_FRAC = 0.25
DEFAULT_PROFILE = 468


def _load_region_table() -> dict:
    text = resources.files("idinpaint.data").joinpath("facemesh_regions.json").read_text()
    return json.loads(text)


_REGION_TABLE = _load_region_table()


def region_indices(region: str) -> list[int]:
    if region not in _REGION_TABLE or region == "profile":
        raise ArgumentError(f"unknown landmark region {region!r}")
    return list(_REGION_TABLE[region])


@dataclass(frozen=True)
class FaceLandmarks:
    """A dense landmark set with x, y in [0, 1] (z unconstrained)."""

    points: np.ndarray
    profile: int = DEFAULT_PROFILE

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DataError(f"landmarks must be [K, 3], got {pts.shape}")
        if pts.shape[0] != self.profile:
            raise DataError(
                f"expected {self.profile} landmarks, got {pts.shape[0]}")
        if not np.isfinite(pts).all():
            raise DataError("landmarks contain non-finite values")
        xy = pts[:, :2]
        if xy.min() < 0.0 or xy.max() > 1.0:
            raise DataError("landmark x/y coordinates must lie in [0, 1]")
        object.__setattr__(self, "points", pts)

    @classmethod
    def load(cls, path: str | Path, profile: int = DEFAULT_PROFILE) -> "FaceLandmarks":
        return cls(mio.load_landmarks(path), profile=profile)

    def subset(self, region: str) -> np.ndarray:
        idx = region_indices(region)
        if max(idx) >= self.points.shape[0]:
            raise DataError(f"region {region!r} indexes past landmark count")
        return self.points[idx]


@dataclass(frozen=True)
class RegionBox:
    """Half-open pixel rectangle [x0, x1) x [y0, y1) for one region."""

    region: str
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.region not in REGIONS:
            raise ArgumentError(f"unknown region {self.region!r}")
        if self.x0 >= self.x1 or self.y0 >= self.y1:
            raise GeometryError(
                f"degenerate {self.region} box ({self.x0},{self.y0},{self.x1},{self.y1})")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def intersects(self, other: "RegionBox") -> bool:
        return (self.x0 < other.x1 and other.x0 < self.x1
                and self.y0 < other.y1 and other.y0 < self.y1)


def inter_ocular_distance(landmarks: FaceLandmarks, width: int, height: int) -> float:
    """Pixel distance between the two eye-landmark centroids."""
    scale = np.array([width, height], dtype=np.float64)
    left = landmarks.subset("left_eye" if "left_eye" in _REGION_TABLE else "eyes")
    right = landmarks.subset("right_eye")
    lc = left[:, :2].mean(axis=0) * scale
    rc = right[:, :2].mean(axis=0) * scale
    return float(np.linalg.norm(lc - rc))


def region_box(landmarks: FaceLandmarks, region: str, image_size: tuple[int, int],
               pad_frac: float = DEFAULT_PAD_FRAC) -> RegionBox:
    """Tight pixel box over a region's landmarks, eye box padded.

    image_size is (height, width). The eyes box grows on every side by
    pad_frac times the inter-ocular distance; all boxes are clamped to the
    image and integerized outward (floor/ceil) before clamping.
    """
    if region not in REGIONS:
        raise ArgumentError(f"unknown region {region!r}")
    if pad_frac < 0:
        raise ArgumentError(f"pad_frac must be >= 0, got {pad_frac}")
    height, width = image_size
    if height <= 0 or width <= 0:
        raise ArgumentError(f"bad image size {image_size}")
    pts = landmarks.subset(region)
    xs = pts[:, 0] * width
    ys = pts[:, 1] * height
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if region == "eyes":
        pad = pad_frac * inter_ocular_distance(landmarks, width, height)
        x0, x1 = x0 - pad, x1 + pad
        y0, y1 = y0 - pad, y1 + pad
    ix0 = max(0, math.floor(x0))
    iy0 = max(0, math.floor(y0))
    ix1 = min(width, math.ceil(x1))
    iy1 = min(height, math.ceil(y1))
    if ix0 >= ix1 or iy0 >= iy1:
        raise GeometryError(f"{region} box collapsed after clamping to {width}x{height}")
    return RegionBox(region, ix0, iy0, ix1, iy1)


def _clip_against(low: RegionBox, high: RegionBox) -> RegionBox:
    """Shrink the lower-priority box until it no longer meets the higher one.

    Four candidates move one edge of the low box flush with the high box;
    the survivor with the largest remaining area wins. If every candidate
    is empty the low box is annihilated and that is a geometry error.
    """
    if not low.intersects(high):
        return low
    candidates = []
    if high.x1 < low.x1:
        candidates.append(RegionBox(low.region, high.x1, low.y0, low.x1, low.y1))
    if low.x0 < high.x0:
        candidates.append(RegionBox(low.region, low.x0, low.y0, high.x0, low.y1))
    if high.y1 < low.y1:
        candidates.append(RegionBox(low.region, low.x0, high.y1, low.x1, low.y1))
    if low.y0 < high.y0:
        candidates.append(RegionBox(low.region, low.x0, low.y0, low.x1, high.y0))
    if not candidates:
        raise GeometryError(
            f"{low.region} box annihilated by {high.region} during overlap resolution")
    return max(candidates, key=lambda b: b.area)


def resolve_overlaps(boxes: list[RegionBox]) -> list[RegionBox]:
    """Make region boxes pairwise disjoint by clipping lower priorities.

    Priority order is eyes > nose > mouth. Higher-priority boxes are never
    modified; each lower box is clipped against every resolved box above
    it. Clipping only shrinks, so no new overlap can appear.
    """
    by_region = {b.region: b for b in boxes}
    if len(by_region) != len(boxes):
        raise ArgumentError("duplicate region in box list")
    resolved: list[RegionBox] = []
    for region in REGIONS:
        if region not in by_region:
            continue
        box = by_region[region]
        for higher in resolved:
            box = _clip_against(box, higher)
        resolved.append(box)
    order = {b.region: b for b in resolved}
    return [order[b.region] for b in boxes]


def rasterize(box: RegionBox, height: int, width: int) -> np.ndarray:
    """Binary [H, W] uint8 mask; pixel (r, c) covered iff y0<=r<y1, x0<=c<x1."""
    if box.x1 > width or box.y1 > height or box.x0 < 0 or box.y0 < 0:
        raise ArgumentError(
            f"{box.region} box ({box.x0},{box.y0},{box.x1},{box.y1}) "
            f"exceeds image bounds {width}x{height}")
    mask = np.zeros((height, width), dtype=np.uint8)
    mask[box.y0:box.y1, box.x0:box.x1] = 1
    return mask


def boxes_for_image(landmarks: FaceLandmarks, image_size: tuple[int, int],
                    pad_frac: float = DEFAULT_PAD_FRAC) -> list[RegionBox]:
    raw = [region_box(landmarks, r, image_size, pad_frac) for r in REGIONS]
    return resolve_overlaps(raw)


def build_dataset(corpus_manifest: str | Path, out_dir: str | Path,
                  pad_frac: float = DEFAULT_PAD_FRAC,
                  profile: int = DEFAULT_PROFILE) -> Path:
    """Generate per-region masks for every corpus sample.

    Reads a corpus manifest whose rows carry image_path, identity_id and
    landmark_path, writes one PNG mask per region under out_dir/masks/,
    and returns the path of the new mask manifest.
    """
    corpus_manifest = Path(corpus_manifest)
    out_dir = Path(out_dir)
    mask_dir = out_dir / "masks"
    mask_dir.mkdir(parents=True, exist_ok=True)
    rows_out = []
    for row in mio.read_manifest(corpus_manifest):
        for key in ("image_path", "identity_id", "landmark_path"):
            if key not in row:
                raise DataError(f"corpus manifest row missing {key!r}: {row}")
        image_path = mio.resolve(corpus_manifest, row["image_path"])
        lm_path = mio.resolve(corpus_manifest, row["landmark_path"])
        image = mio.load_image(image_path)
        height, width = image.shape[1], image.shape[2]
        landmarks = FaceLandmarks.load(lm_path, profile=profile)
        try:
            boxes = boxes_for_image(landmarks, (height, width), pad_frac)
        except GeometryError as exc:
            raise GeometryError(f"{image_path.name}: {exc}") from exc
        stem = image_path.stem
        out_row = {
            "image_path": os_relpath(image_path, out_dir),
            "identity_id": row["identity_id"],
            "landmark_path": os_relpath(lm_path, out_dir),
        }
        for box in boxes:
            mask = rasterize(box, height, width)
            mask_path = mask_dir / f"{stem}_{box.region}.png"
            mio.save_mask(mask, mask_path)
            out_row[f"{box.region}_mask"] = os_relpath(mask_path, out_dir)
        rows_out.append(out_row)
    return mio.write_manifest(out_dir / "masks.jsonl", rows_out)


def os_relpath(path: Path, start: Path) -> str:
    return os.path.relpath(Path(path).resolve(), Path(start).resolve())


@dataclass
class SuppressionReport:
    """Identity similarity after masking each region with a neutral fill."""

    per_region: dict[str, list[float]]
    fill: float
    summary: dict[str, dict[str, float]] = field(init=False)

    def __post_init__(self):
        self.summary = {}
        for region, sims in self.per_region.items():
            arr = np.asarray(sims, dtype=np.float64)
            self.summary[region] = {
                "count": int(arr.size),
                "mean": float(arr.mean()),
                "std": float(arr.std()),
                "min": float(arr.min()),
                "max": float(arr.max()),
            }

    def ordering(self) -> list[str]:
        """Regions sorted by mean retained similarity, most suppressed first."""
        return sorted(self.summary, key=lambda r: self.summary[r]["mean"])

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / "suppression.json"
        with open(json_path, "w") as fh:
            json.dump({"fill": self.fill, "summary": self.summary,
                       "ordering": self.ordering()}, fh, indent=1, sort_keys=True)
        csv_path = out_dir / "suppression.csv"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["region", "sample_index", "similarity"])
            for region in sorted(self.per_region):
                for i, sim in enumerate(self.per_region[region]):
                    writer.writerow([region, i, f"{sim:.8f}"])
        return json_path, csv_path


def analyze_suppression(mask_manifest: str | Path, encoder, fill: float = 0.0,
                        out_dir: str | Path | None = None) -> SuppressionReport:
    """Measure how much masking each region suppresses identity evidence.

    For every sample the reference embedding of the intact image is
    compared against the embedding of the image with one region replaced
    by the fill value; similarity is the embedding dot product.
    """
    from .identity import embed

    rows = mio.read_manifest(mask_manifest)
    per_region: dict[str, list[float]] = {r: [] for r in REGIONS}
    for row in rows:
        image = mio.load_image(mio.resolve(mask_manifest, row["image_path"]))
        e_ref = embed(image[None], encoder)
        for region in REGIONS:
            key = f"{region}_mask"
            if key not in row:
                raise DataError(f"manifest row missing {key!r}")
            mask = mio.load_mask(mio.resolve(mask_manifest, row[key]))
            masked = image * (1.0 - mask) + fill * mask
            e_masked = embed(masked[None], encoder)
            sim = float((e_ref * e_masked).sum())
            per_region[region].append(sim)
    report = SuppressionReport(per_region=per_region, fill=fill)
    if out_dir is not None:
        report.write(out_dir)
    return report
