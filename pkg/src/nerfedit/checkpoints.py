"""Checkpoint fragment format shared by all trainable components.

A checkpoint is a pair of files:
  * ``<stem>.json``  -- manifest: format version, free-form ``extras`` and a
    list of fragments ``{name, shape, dtype: "f32", byte_offset, byte_length}``
  * ``<stem>.bin``   -- one little-endian raw blob the fragments point into
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ContractError

FORMAT_VERSION = 1


def save_fragments(stem: str | Path, arrays: dict[str, np.ndarray],
                   extras: dict | None = None) -> tuple[Path, Path]:
    """Write ``arrays`` as a manifest + blob pair under ``stem``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    fragments = []
    offset = 0
    chunks = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float32)
        raw = arr.astype("<f4").tobytes()
        fragments.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "f32",
            "byte_offset": offset,
            "byte_length": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "version": FORMAT_VERSION,
        "extras": extras or {},
        "fragments": fragments,
    }
    manifest_path = stem.with_suffix(".json")
    blob_path = stem.with_suffix(".bin")
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    blob_path.write_bytes(b"".join(chunks))
    return manifest_path, blob_path


def load_fragments(stem: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back a manifest + blob pair written by :func:`save_fragments`."""
    stem = Path(stem)
    manifest_path = stem.with_suffix(".json")
    blob_path = stem.with_suffix(".bin")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint version in {manifest_path}")
    blob = blob_path.read_bytes()
    arrays = {}
    for frag in manifest["fragments"]:
        if frag["dtype"] != "f32":
            raise ContractError(f"unsupported fragment dtype {frag['dtype']!r}")
        lo = frag["byte_offset"]
        hi = lo + frag["byte_length"]
        arr = np.frombuffer(blob[lo:hi], dtype="<f4").reshape(frag["shape"])
        arrays[frag["name"]] = arr.copy()
    return arrays, manifest.get("extras", {})
