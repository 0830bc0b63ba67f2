"""Bit-exact parameter checkpoints.

A checkpoint is a pair of files: a UTF-8 JSON manifest at ``path`` listing the
format version, the blob filename, and every parameter's name, shape, and byte
offset, plus a sibling binary blob of little-endian 32-bit floats laid out in
manifest order at ``path + ".bin"``.
"""

from __future__ import annotations

import json
import os

import numpy as np

CHECKPOINT_VERSION = "pmt-ckpt-1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(params, path) -> None:
    path = os.fspath(path)
    blob_path = path + ".bin"
    entries = []
    offset = 0
    chunks = []
    for p in params:
        raw = np.ascontiguousarray(p.tensor.data, dtype="<f4").tobytes()
        entries.append({"name": p.name, "shape": list(p.tensor.data.shape), "offset": offset})
        offset += len(raw)
        chunks.append(raw)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "blob": os.path.basename(blob_path),
        "params": entries,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    with open(blob_path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Parameter name -> float32 array, exactly as saved."""
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as err:
        raise CheckpointError(f"unreadable checkpoint manifest {path}: {err}") from err
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {manifest.get('version')!r} in {path}")
    blob_path = os.path.join(os.path.dirname(path) or ".", manifest["blob"])
    with open(blob_path, "rb") as fh:
        blob = fh.read()
    out = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise CheckpointError(f"checkpoint blob truncated for {entry['name']}")
        out[entry["name"]] = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape).copy()
    return out


def load_into(params, path) -> None:
    """Load a checkpoint into matching parameters (names and shapes must agree)."""
    state = load_checkpoint(path)
    for p in params:
        if p.name not in state:
            raise CheckpointError(f"checkpoint missing parameter {p.name}")
        value = state[p.name]
        if value.shape != p.tensor.data.shape:
            raise CheckpointError(
                f"shape mismatch for {p.name}: checkpoint {value.shape} vs model {p.tensor.data.shape}")
        p.tensor.data = value.astype(p.tensor.data.dtype, copy=False)
