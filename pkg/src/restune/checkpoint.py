"""Named-tensor checkpoints: an ``.npz`` of arrays plus a JSON sidecar."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    """Write ``{name: Tensor|array}`` to ``path`` and ``meta`` next to it."""
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    arrays = {name: np.asarray(getattr(t, "data", t), dtype=np.float64)
              for name, t in tensors.items()}
    # npz keys may not contain '/' portably; store an index instead
    index = sorted(arrays)
    np.savez(path, **{f"t{i}": arrays[name] for i, name in enumerate(index)})
    sidecar = {"tensors": [{"name": n, "shape": list(arrays[n].shape)} for n in index]}
    sidecar.update(meta or {})
    _sidecar(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    meta = json.loads(_sidecar(path).read_text(encoding="utf-8"))
    with np.load(path) as data:
        arrays = {}
        for i, entry in enumerate(meta["tensors"]):
            arr = data[f"t{i}"]
            if list(arr.shape) != entry["shape"]:
                raise ValueError(f"{entry['name']}: stored shape {arr.shape} "
                                 f"disagrees with index {entry['shape']}")
            arrays[entry["name"]] = arr
    return arrays, meta
