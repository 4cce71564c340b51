"""Checkpoint files: a JSON index next to a raw little-endian f64 payload.

``<stem>.json`` holds a ``meta`` dict plus, per array name, its shape
and byte offset into ``<stem>.bin``. Arrays are stored in insertion
order, so save(load(x)) round-trips byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..errors import DataError


def save_arrays(stem, arrays: dict, meta: dict | None = None) -> None:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    index = {}
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        payload = np.ascontiguousarray(arr).tobytes()
        index[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(payload)
        offset += len(payload)
    doc = {"meta": meta or {}, "arrays": index}
    (stem.with_suffix(".json")).write_text(json.dumps(doc, sort_keys=True, indent=1))
    (stem.with_suffix(".bin")).write_bytes(b"".join(chunks))


def load_arrays(stem) -> tuple:
    """Returns (arrays: dict[str, ndarray], meta: dict)."""
    stem = Path(stem)
    json_path = stem.with_suffix(".json")
    bin_path = stem.with_suffix(".bin")
    if not json_path.exists() or not bin_path.exists():
        raise DataError(f"checkpoint: missing {json_path} or {bin_path}")
    doc = json.loads(json_path.read_text())
    raw = bin_path.read_bytes()
    arrays = {}
    # iterate by payload offset: the JSON index is key-sorted, but the
    # returned dict must keep write order so a re-save is byte-identical
    by_offset = sorted(doc["arrays"].items(), key=lambda kv: kv[1]["offset"])
    for name, entry in by_offset:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > len(raw):
            raise DataError(f"checkpoint: payload truncated for array {name!r}")
        arrays[name] = (
            np.frombuffer(raw[start:end], dtype="<f8").reshape(shape).copy()
        )
    return arrays, doc.get("meta", {})


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    digest.update(Path(path).read_bytes())
    return digest.hexdigest()


def checkpoint_hash(stem) -> str:
    """Hash of index + payload, used for provenance in reports."""
    stem = Path(stem)
    digest = hashlib.sha256()
    digest.update((stem.with_suffix(".json")).read_bytes())
    digest.update((stem.with_suffix(".bin")).read_bytes())
    return digest.hexdigest()
