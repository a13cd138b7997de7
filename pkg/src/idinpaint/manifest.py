"""Dataset manifests and image/landmark file IO.

A manifest is a JSONL file, one record per sample, with paths stored
relative to the manifest's directory. Images travel as 8-bit PNGs and are
mapped to float tensors in [-1, 1]; masks are single-channel PNGs where
255 marks the region to inpaint.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from PIL import Image

from .errors import ArgumentError, DataError


def write_manifest(path: str | Path, rows: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON record: {exc}") from exc
            if not isinstance(row, dict):
                raise DataError(f"{path}:{lineno}: record must be an object")
            rows.append(row)
    if not rows:
        raise DataError(f"manifest is empty: {path}")
    return rows


def resolve(manifest_path: str | Path, rel: str) -> Path:
    """Resolve a manifest-relative path against the manifest's directory."""
    return (Path(manifest_path).parent / rel).resolve()


def save_image(image: torch.Tensor, path: str | Path) -> Path:
    """Write a [3, H, W] float tensor in [-1, 1] as an 8-bit RGB PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ArgumentError(f"image must be [3, H, W], got shape {tuple(image.shape)}")
    arr = image.detach().clamp(-1.0, 1.0).numpy()
    arr = np.round((arr.transpose(1, 2, 0) + 1.0) * 127.5).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)
    return path


def load_image(path: str | Path, size: int | None = None) -> torch.Tensor:
    """Read an RGB image as a [3, H, W] float tensor in [-1, 1]."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                raise DataError(
                    f"image {path} is {im.size[0]}x{im.size[1]}, expected {size}x{size}")
            arr = np.asarray(im, dtype=np.float32)
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return torch.from_numpy(arr.transpose(2, 0, 1) / 127.5 - 1.0)


def save_mask(mask: np.ndarray | torch.Tensor, path: str | Path) -> Path:
    """Write a binary [H, W] mask as an 8-bit PNG with 255 = inpaint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().numpy()
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise DataError("mask values must be exactly 0 or 1")
    arr = mask.astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)
    return path


def load_mask(path: str | Path) -> torch.Tensor:
    """Read a mask PNG as a [H, W] float tensor with values in {0, 1}."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"mask not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    uniq = np.unique(arr)
    if not np.isin(uniq, (0, 255)).all():
        raise DataError(f"mask {path} has non-binary values {uniq[:8].tolist()}")
    return torch.from_numpy((arr == 255).astype(np.float32))


def save_landmarks(points: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pts = np.asarray(points, dtype=np.float64)
    with open(path, "w") as fh:
        json.dump({"points": [[round(float(v), 8) for v in p] for p in pts]}, fh)
    return path


def load_landmarks(path: str | Path) -> np.ndarray:
    """Read landmarks as a [K, 3] float array of normalized coordinates.

    Accepts the JSON form {"points": [[x, y, z], ...]} or a plain text file
    with one whitespace-separated x y z triple per line.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"landmark file not found: {path}")
    text = path.read_text()
    if path.suffix == ".json":
        try:
            obj = json.loads(text)
            pts = np.asarray(obj["points"], dtype=np.float64)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed landmark JSON {path}: {exc}") from exc
    else:
        try:
            rows = [[float(v) for v in line.split()] for line in text.splitlines() if line.strip()]
            pts = np.asarray(rows, dtype=np.float64)
        except ValueError as exc:
            raise DataError(f"malformed landmark text {path}: {exc}") from exc
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DataError(f"landmarks in {path} must be [K, 3], got {pts.shape}")
    return pts
