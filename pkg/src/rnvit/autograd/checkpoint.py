"""Parameter checkpoints: a flat little-endian float64 blob plus a JSON manifest."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tensor import Tensor


def save_checkpoint(path, params: dict, *, seed: int, step: int, config: dict | None = None) -> None:
    """Write ``<path>.bin`` and ``<path>.json``; parameter order is preserved."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, p in params.items():
        arr = np.ascontiguousarray(p.data if isinstance(p, Tensor) else p, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "format": "rnvit-checkpoint-1",
        "dtype": "float64-le",
        "seed": int(seed),
        "step": int(step),
        "config": config or {},
        "params": entries,
    }
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Return ``(params, manifest)`` with params as a name -> ndarray dict."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = path.with_suffix(".bin").read_bytes()
    params = {}
    for e in manifest["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"])
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return params, manifest
