"""Flat binary tensor checkpoints.

Layout: an 8-byte magic, a little-endian uint64 header length, a UTF-8 JSON
header ``{"version", "meta", "tensors": [{"name", "shape"}, ...]}``, then the
tensor payloads as raw little-endian float64 in header order. Writing the same
tensors and meta twice produces byte-identical files; there are no timestamps.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CompatibilityError, ShapeError

MAGIC = b"FVCKPT01"
VERSION = 1


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write named float64 tensors plus a JSON-safe meta dict to ``path``."""
    entries = []
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps(
        {"version": VERSION, "meta": meta, "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back as (tensors, meta). Rejects foreign files."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CompatibilityError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("version") != VERSION:
            raise CompatibilityError(
                f"{path}: checkpoint version {header.get('version')} is not supported"
            )
        tensors: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ShapeError(f"{path}: truncated tensor {entry['name']!r}")
            tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise ShapeError(f"{path}: trailing bytes after last tensor")
    return tensors, header["meta"]
