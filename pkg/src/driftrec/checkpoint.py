"""Directory checkpoints: ``manifest.json`` + ``tensors.bin`` (little-endian f32)."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .errors import DataError

MANIFEST = "manifest.json"
TENSORS = "tensors.bin"


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return t.detach().cpu().numpy().astype("<f4", copy=False).tobytes(order="C")


def save_checkpoint(module: torch.nn.Module, path, config: dict, seed: int,
                    provenance: dict | None = None) -> str:
    """Write ``module``'s parameters; returns the sha256 of ``tensors.bin``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, digest = [], hashlib.sha256()
    with open(path / TENSORS, "wb") as fh:
        for name, t in module.state_dict().items():
            raw = _tensor_bytes(t)
            fh.write(raw)
            digest.update(raw)
            entries.append({"name": name, "shape": list(t.shape)})
    manifest = {
        "config": config,
        "seed": seed,
        "dtype": "float32-le",
        "tensors": entries,
        "sha256": digest.hexdigest(),
        "provenance": provenance or {},
    }
    with open(path / MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest["sha256"]


def read_manifest(path) -> dict:
    path = Path(path)
    if not (path / MANIFEST).exists():
        raise FileNotFoundError(f"{path}: no {MANIFEST}")
    with open(path / MANIFEST, encoding="utf-8") as fh:
        return json.load(fh)


def load_into(module: torch.nn.Module, path) -> dict:
    """Fill ``module`` in place from a checkpoint, validating names and shapes."""
    path = Path(path)
    manifest = read_manifest(path)
    flat = np.fromfile(path / TENSORS, dtype="<f4")
    state = module.state_dict()
    if [e["name"] for e in manifest["tensors"]] != list(state):
        raise DataError(f"{path}: tensor names do not match the model")
    offset, loaded = 0, {}
    for e in manifest["tensors"]:
        ref = state[e["name"]]
        if list(ref.shape) != e["shape"]:
            raise DataError(f"{path}: {e['name']} has shape {e['shape']}, model expects {list(ref.shape)}")
        n = int(np.prod(e["shape"], dtype=np.int64))
        chunk = flat[offset:offset + n]
        if len(chunk) != n:
            raise DataError(f"{path}: {TENSORS} truncated")
        loaded[e["name"]] = torch.from_numpy(chunk.reshape(e["shape"]).copy()).to(ref.dtype)
        offset += n
    if offset != len(flat):
        raise DataError(f"{path}: {TENSORS} has trailing data")
    module.load_state_dict(loaded)
    return manifest


def state_hash(module: torch.nn.Module, names=None) -> str:
    """sha256 over the raw parameter bytes (optionally a subset, in order)."""
    digest = hashlib.sha256()
    for name, t in module.state_dict().items():
        if names is None or name in names:
            digest.update(name.encode())
            digest.update(t.detach().cpu().numpy().tobytes())
    return digest.hexdigest()
