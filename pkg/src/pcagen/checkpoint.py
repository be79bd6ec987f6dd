"""Checkpoint container: one directory per stage.

meta.json holds config plus a params table mapping parameter names to tensor
files in the binary format from the dataset module. Bytes are reproducible:
tensors are raw float32 and the JSON is written with sorted keys.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .dataset import read_tensor, write_tensor
from .errors import CorruptTensor, IoError, MissingFile, SchemaError


def digest_state(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(np.asarray(arrays[name], dtype=np.float32))
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_state(directory, arrays: dict[str, np.ndarray], meta: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table = {}
    for i, name in enumerate(sorted(arrays)):
        fname = f"p{i:04d}.pcag"
        write_tensor(np.asarray(arrays[name], dtype=np.float32), directory / fname)
        table[name] = fname
    doc = dict(meta)
    doc["params"] = table
    doc["digest"] = digest_state(arrays)
    try:
        with open(directory / "meta.json", "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise IoError(f"cannot write checkpoint meta in {directory}: {e}") from e


def load_state(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise MissingFile(f"no checkpoint at {directory}")
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(f"{meta_path}: invalid JSON: {e}") from e
    if "params" not in meta or not isinstance(meta["params"], dict):
        raise SchemaError(f"{meta_path}: missing params table")
    arrays = {}
    for name, fname in meta["params"].items():
        arrays[name] = read_tensor(directory / fname)
    stored = meta.get("digest")
    if stored is not None and stored != digest_state(arrays):
        raise CorruptTensor(f"{directory}: parameter digest mismatch")
    return arrays, meta
