"""Manifest + raw blob checkpoint format.

``<stem>.manifest`` is plain text. Metadata lines look like
``#meta <key> <json>``; every other non-empty line is
``<name> <shape> <dtype> <offset>`` where shape is ``AxBxC`` (``scalar`` for
0-d), dtype is ``f32`` or ``f64`` and offset is a byte offset into
``<stem>.bin``, a single little-endian blob.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_CODES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}


class CheckpointError(ValueError):
    pass


def _paths(stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_name(stem.name + ".manifest"), stem.with_name(stem.name + ".bin")


def save_checkpoint(stem: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    manifest_path, blob_path = _paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, value in (meta or {}).items():
        if any(ch.isspace() for ch in key):
            raise CheckpointError(f"metadata key {key!r} contains whitespace")
        lines.append(f"#meta {key} {json.dumps(value, sort_keys=True)}")
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"tensor {name} has unsupported dtype {arr.dtype}")
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"{name} {shape} {code} {offset}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        chunks.append(raw)
        offset += len(raw)
    manifest_path.write_text("\n".join(lines) + "\n")
    blob_path.write_bytes(b"".join(chunks))


def read_meta(stem: str | Path) -> dict[str, Any]:
    manifest_path, _ = _paths(stem)
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    meta = {}
    for line in manifest_path.read_text().splitlines():
        if line.startswith("#meta "):
            _, key, value = line.split(" ", 2)
            meta[key] = json.loads(value)
    return meta


def load_checkpoint(stem: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    manifest_path, blob_path = _paths(stem)
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    if not blob_path.exists():
        raise FileNotFoundError(f"checkpoint blob not found: {blob_path}")
    blob = blob_path.read_bytes()
    meta = read_meta(stem)
    arrays = {}
    expected = 0
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise CheckpointError(f"{manifest_path}:{lineno}: expected 'name shape dtype offset', got {line!r}")
        name, shape_s, code, off_s = parts
        if code not in _DTYPES:
            raise CheckpointError(f"{manifest_path}:{lineno}: unknown dtype {code}")
        shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split("x"))
        dt = _DTYPES[code]
        offset = int(off_s)
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset != expected:
            raise CheckpointError(f"{manifest_path}:{lineno}: tensor {name} at offset {offset}, expected {expected}")
        if offset + nbytes > len(blob):
            raise CheckpointError(f"blob {blob_path} too short for tensor {name}")
        arrays[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(shape).astype(dt.newbyteorder("="))
        expected = offset + nbytes
    if expected != len(blob):
        raise CheckpointError(f"blob {blob_path} has {len(blob)} bytes, manifest accounts for {expected}")
    return arrays, meta
