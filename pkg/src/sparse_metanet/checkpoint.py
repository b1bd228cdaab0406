"""Flat key -> array checkpoints.

Layout: ``SMNET1\\n``, an 8-byte little-endian header length, a UTF-8 JSON
header (array table, fast-weight config, architecture), then the raw
little-endian float64 payload.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .core import FastWeightConfig, FastWeightNet

MAGIC = b"SMNET1\n"


class CheckpointError(ValueError):
    pass


def model_arrays(model: FastWeightNet) -> dict[str, np.ndarray]:
    out = {}
    for i, layer in enumerate(model.layers):
        out[f"layer{i}.W"] = layer.W.value
        out[f"layer{i}.b"] = layer.b.value
        out[f"layer{i}.M"] = layer.M.value
        out[f"layer{i}.I"] = layer.I
    for i, ml in enumerate(model.metas):
        if ml is None:
            continue
        for name, p in ml.params().items():
            out[f"meta{i}.{name}"] = p.value
    return out


def save_arrays(path, arrays: dict[str, np.ndarray], config: dict | None = None, arch: dict | None = None) -> None:
    table, chunks, offset = [], [], 0
    for key in sorted(arrays):
        a = np.ascontiguousarray(arrays[key], dtype="<f8")
        table.append({"key": key, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"arrays": table, "config": config or {}, "arch": arch or {}},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an SMNET1 checkpoint")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    try:
        header = json.loads(data[pos:pos + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    base = pos + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) * 8
        start = base + entry["offset"]
        if start + n > len(data):
            raise CheckpointError(f"{path}: payload for {entry['key']} is truncated")
        arrays[entry["key"]] = np.frombuffer(data[start:start + n], dtype="<f8").reshape(shape).copy()
    return arrays, header["config"], header["arch"]


def save_checkpoint(path, model: FastWeightNet, fast_cfg: FastWeightConfig | None = None,
                    arch: dict | None = None) -> None:
    save_arrays(path, model_arrays(model), asdict(fast_cfg) if fast_cfg else {}, arch)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], FastWeightConfig | None, dict]:
    arrays, cfg, arch = load_arrays(path)
    return arrays, (FastWeightConfig(**cfg) if cfg else None), arch


def restore(model: FastWeightNet, arrays: dict[str, np.ndarray]) -> None:
    """Copy arrays into ``model`` in place; keys and shapes must match exactly."""
    from .autodiff import Tensor

    expected = model_arrays(model)
    missing = set(expected) - set(arrays)
    extra = set(arrays) - set(expected)
    if missing or extra:
        raise CheckpointError(f"key mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for key, want in expected.items():
        if arrays[key].shape != want.shape:
            raise CheckpointError(f"{key}: shape {arrays[key].shape} != {want.shape}")
    for i, layer in enumerate(model.layers):
        layer.W.value[...] = arrays[f"layer{i}.W"]
        layer.b.value[...] = arrays[f"layer{i}.b"]
        layer.M = Tensor(arrays[f"layer{i}.M"].copy())
        layer.I = arrays[f"layer{i}.I"].copy()
    for i, ml in enumerate(model.metas):
        if ml is None:
            continue
        for name, p in ml.params().items():
            p.value[...] = arrays[f"meta{i}.{name}"]
