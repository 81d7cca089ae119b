"""Directory checkpoints: ``manifest.json`` + ``weights.bin`` (little-endian float32).

The manifest lists ``{name, shape, dtype, offset, length}`` per tensor, with
offsets and lengths counted in elements, in file order.  The same layout is
used for model weights and for feature caches.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


def save_arrays(directory, arrays, meta=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(d / "weights.bin", "wb") as fh:
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=_LE_F32, order="C")  # keeps 0-d shapes
            fh.write(arr.tobytes(order="C"))
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32",
                            "offset": offset, "length": int(arr.size)})
            offset += int(arr.size)
    manifest = {"format_version": FORMAT_VERSION, "tensors": entries}
    manifest.update(meta or {})
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")


def load_arrays(directory):
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    raw = (d / "weights.bin").read_bytes()
    if len(raw) % 4:
        raise ValueError(f"{d / 'weights.bin'}: size {len(raw)} is not a whole number of float32 values")
    flat = np.frombuffer(raw, dtype=_LE_F32)
    arrays = {}
    expected = 0
    for entry in manifest["tensors"]:
        name = entry["name"]
        if entry.get("dtype") != "f32":
            raise ValueError(f"tensor {name}: unsupported dtype {entry.get('dtype')!r}")
        length = int(entry["length"])
        if entry["offset"] != expected:
            raise ValueError(f"tensor {name}: offset {entry['offset']} does not follow previous tensor (expected {expected})")
        if length != int(np.prod(entry["shape"], dtype=np.int64)):
            raise ValueError(f"tensor {name}: length {length} does not match shape {entry['shape']}")
        if expected + length > flat.size:
            raise ValueError(f"tensor {name}: weights file truncated")
        arrays[name] = flat[expected:expected + length].reshape(entry["shape"]).copy()
        expected += length
    if expected != flat.size:
        raise ValueError(f"weights file holds {flat.size} values, manifest describes {expected}")
    return arrays, manifest


def save_checkpoint(directory, module, kind, hyperparameters, vocab_hash, extra_arrays=None, extra_meta=None):
    arrays = dict(module.state_dict())
    arrays.update(extra_arrays or {})
    meta = {"kind": kind, "hyperparameters": hyperparameters, "vocab_hash": vocab_hash}
    meta.update(extra_meta or {})
    save_arrays(directory, arrays, meta)


def load_checkpoint(directory, module, kind=None, vocab_hash=None):
    """Load weights into ``module`` after schema checks; returns (manifest, leftover arrays)."""
    arrays, manifest = load_arrays(directory)
    if kind is not None and manifest.get("kind") != kind:
        raise ValueError(f"checkpoint kind {manifest.get('kind')!r}, expected {kind!r}")
    if vocab_hash is not None and manifest.get("vocab_hash") != vocab_hash:
        raise ValueError("vocabulary hash mismatch between checkpoint and tokenizer")
    own = dict(module.named_parameters())
    for name, p in own.items():
        if name not in arrays:
            raise ValueError(f"checkpoint lacks tensor {name}")
        if tuple(arrays[name].shape) != p.shape:
            raise ValueError(f"tensor {name}: checkpoint shape {arrays[name].shape} does not fit model shape {p.shape}")
    module.load_state_dict({name: arrays.pop(name) for name in own})
    return manifest, arrays


def read_manifest(directory):
    return json.loads((Path(directory) / "manifest.json").read_text(encoding="utf-8"))


def save_feature_cache(path, records, meta=None):
    """One record per sentence: a dict of named arrays."""
    arrays = {}
    for i, rec in enumerate(records):
        for key, arr in rec.items():
            if arr is not None:
                arrays[f"{i}/{key}"] = arr
    save_arrays(path, arrays, dict(meta or {}, records=len(records)))


def load_feature_cache(path):
    arrays, manifest = load_arrays(path)
    records = [dict() for _ in range(manifest["records"])]
    for name, arr in arrays.items():
        i, key = name.split("/", 1)
        records[int(i)][key] = arr
    return records, manifest
