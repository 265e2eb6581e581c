"""Checkpoint directories: manifest.json plus a flat little-endian float32 blob."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, param_shapes

FORMAT = "kgicl-checkpoint/1"
MANIFEST = "manifest.json"
BLOB = "params.bin"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    seed: int = 0
    meta: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    order = list(param_shapes(ckpt.config))
    entries = []
    with open(os.path.join(path, BLOB), "wb") as fh:
        for name in order:
            arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
            entries.append({"name": name, "shape": list(arr.shape)})
            fh.write(arr.tobytes())
    manifest = {"format": FORMAT, "model": ckpt.config.to_dict(), "seed": ckpt.seed,
                "params": entries, "meta": ckpt.meta}
    with open(os.path.join(path, MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str) -> Checkpoint:
    mpath = os.path.join(path, MANIFEST)
    if not os.path.isfile(mpath):
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    with open(mpath, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    cfg = ModelConfig(**manifest["model"])
    with open(os.path.join(path, BLOB), "rb") as fh:
        blob = fh.read()
    params = {}
    pos = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape))
        if pos + nbytes > len(blob):
            raise CheckpointError(f"params.bin truncated at parameter {entry['name']}")
        params[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4,
                                              offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError(f"params.bin has {len(blob) - pos} trailing bytes")
    expected = param_shapes(cfg)
    if set(expected) != set(params):
        missing = sorted(set(expected) ^ set(params))
        raise CheckpointError(f"checkpoint parameters do not match model config: {missing[:3]}")
    return Checkpoint(cfg, params, manifest.get("seed", 0), manifest.get("meta", {}))
