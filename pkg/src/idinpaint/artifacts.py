"""Checkpoint files, content hashing, and seeded RNG derivation.

Checkpoints are single binary blobs (torch.save) wrapping a dict with a
format version tag, a kind tag, the geometry fields needed for load-time
shape validation, and the raw state dict. Hashes are computed over the
parameter *contents* (sorted name order), not over the file bytes, so two
checkpoints holding identical weights always hash identically.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import DataError

FORMAT_VERSION = 1


def weights_hash(state_dict: dict[str, torch.Tensor]) -> str:
    """SHA-256 over (name, dtype, shape, bytes) of every tensor, sorted by name."""
    h = hashlib.sha256()
    for name in sorted(state_dict):
        t = state_dict[name]
        t = t.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def module_hash(module: torch.nn.Module) -> str:
    return weights_hash(module.state_dict())


def file_hash(path: str | Path) -> str:
    """SHA-256 of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(path: str | Path, kind: str, state_dict: dict,
                    geometry: dict[str, Any], extra: dict[str, Any] | None = None) -> str:
    """Write a versioned checkpoint blob. Returns the weights hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wh = weights_hash(state_dict)
    blob = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "geometry": dict(geometry),
        "state_dict": state_dict,
        "extra": dict(extra or {}),
        "weights_sha256": wh,
    }
    torch.save(blob, path)
    return wh


def load_checkpoint(path: str | Path, kind: str | None = None) -> dict:
    """Load and validate a checkpoint blob written by save_checkpoint."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or "format_version" not in blob:
        raise DataError(f"not an idinpaint checkpoint: {path}")
    if blob["format_version"] != FORMAT_VERSION:
        raise DataError(
            f"unsupported checkpoint version {blob['format_version']} in {path}")
    if kind is not None and blob.get("kind") != kind:
        raise DataError(
            f"expected a '{kind}' checkpoint, found '{blob.get('kind')}' in {path}")
    return blob


def derive_seed(*parts: int | str) -> int:
    """Stable 63-bit seed derived from a tuple of ints/strings.

    Used to hand every consumer of randomness its own independent stream:
    the trainer derives one seed per (run seed, step, purpose), so any step
    can be reproduced without replaying the steps before it.
    """
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little") & ((1 << 63) - 1)


def torch_generator(*parts: int | str) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(derive_seed(*parts))
    return g


def numpy_rng(*parts: int | str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))
