"""Self-describing binary checkpoints.

Layout (little-endian):
    8 bytes   magic ``EEGMOECK``
    u32       format version
    u64       header length in bytes
    header    UTF-8 JSON (sorted keys): config, layer specs, step, rng states and
              a table of arrays (name, shape, byte offset)
    blobs     raw float64 arrays in table order

Nothing time- or host-dependent is written, so saving the same state twice
gives identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EEGMOECK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write ``arrays`` (name -> float array) and JSON-serialisable ``meta`` atomically."""
    table, offset = [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for name in arrays:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen])
    base = 20 + hlen
    arrays = {}
    for entry in header["arrays"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=start).reshape(entry["shape"]).copy()
    return arrays, header["meta"]


def model_arrays(model) -> dict[str, np.ndarray]:
    """Parameters plus non-gradient router biases."""
    arrays = {f"param/{n}": p.data for n, p in model.named_parameters()}
    for i, pool in enumerate(model.pools()):
        arrays[f"router_bias/{i}"] = pool.router_bias
    return arrays


def restore_model(model, arrays: dict[str, np.ndarray], strict: bool = True) -> list[str]:
    """Copy arrays into ``model``; returns names of model parameters not found in ``arrays``."""
    missing = []
    for n, p in model.named_parameters():
        key = f"param/{n}"
        if key not in arrays:
            if strict:
                raise CheckpointError(f"checkpoint lacks parameter {n}")
            missing.append(n)
            continue
        if arrays[key].shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {n}: {arrays[key].shape} vs {p.data.shape}")
        p.data = arrays[key].copy()
    for i, pool in enumerate(model.pools()):
        key = f"router_bias/{i}"
        if key in arrays:
            pool.router_bias = arrays[key].copy()
    return missing
