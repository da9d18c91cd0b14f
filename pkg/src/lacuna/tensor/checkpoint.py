"""Parameter checkpoints: a JSON manifest plus one raw little-endian float32 file per tensor."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DataError

MANIFEST = "manifest.json"


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    step: int = 0
    meta: dict = field(default_factory=dict)


def _filename(name: str) -> str:
    return name.replace("/", "_") + ".f32"


def save_checkpoint(ckpt: Checkpoint, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = []
    for name, arr in ckpt.params.items():
        fname = _filename(name)
        (directory / fname).write_bytes(np.asarray(arr, dtype="<f4").tobytes(order="C"))
        tensors.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {"format": "lacuna-checkpoint-1", "dtype": "float32-le", "step": ckpt.step,
                "tensors": tensors, "meta": ckpt.meta}
    tmp = directory / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(directory / MANIFEST)
    return directory


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
    except FileNotFoundError as e:
        raise DataError(f"no checkpoint manifest in {directory}") from e
    params = {}
    for t in manifest["tensors"]:
        raw = (directory / t["file"]).read_bytes()
        shape = tuple(t["shape"])
        expected = int(np.prod(shape)) * 4
        if len(raw) != expected:
            raise DataError(f"checkpoint tensor {t['name']} has {len(raw)} bytes, expected {expected}")
        params[t["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return Checkpoint(params, manifest.get("step", 0), manifest.get("meta", {}))
