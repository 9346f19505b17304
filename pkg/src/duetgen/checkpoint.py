"""Shared checkpoint container: JSON header followed by raw array blobs.

Byte layout (little-endian):
  bytes 0..7   magic b"DGCKPT01"
  bytes 8..11  uint32 header length H
  bytes 12..12+H  UTF-8 JSON header: {"kind", "config", "metadata",
                  "blobs": [{"name", "shape", "dtype"}, ...]}
  then each blob's raw C-order bytes, in header order

No pickle anywhere, so checkpoints are portable and diffable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_MAGIC = b"DGCKPT01"
_DTYPES = {"float32", "float64", "int64"}


@dataclass
class Checkpoint:
    kind: str
    config: dict
    arrays: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)


def config_hash(config: dict) -> str:
    """Stable hash of a JSON-serializable config."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def save_checkpoint(
    path: str | Path,
    kind: str,
    config: dict,
    arrays: dict[str, np.ndarray],
    metadata: dict | None = None,
) -> None:
    blobs = []
    for name, arr in arrays.items():
        if arr.dtype.name not in _DTYPES:
            raise ValueError(f"unsupported blob dtype {arr.dtype} for {name}")
        blobs.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name})
    header = {
        "kind": kind,
        "config": config,
        "config_hash": config_hash(config),
        "metadata": metadata or {},
        "blobs": blobs,
    }
    hj = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(np.uint32(len(hj)).tobytes())
        f.write(hj)
        for name, arr in arrays.items():
            f.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a duetgen checkpoint (magic {magic!r})")
        (hlen,) = np.frombuffer(f.read(4), dtype=np.uint32)
        header = json.loads(f.read(int(hlen)).decode())
        arrays = {}
        for blob in header["blobs"]:
            dtype = np.dtype(blob["dtype"])
            count = int(np.prod(blob["shape"])) if blob["shape"] else 1
            data = f.read(count * dtype.itemsize)
            arrays[blob["name"]] = np.frombuffer(data, dtype=dtype).reshape(blob["shape"]).copy()
    return Checkpoint(header["kind"], header["config"], arrays, header.get("metadata", {}))


def state_dict_to_arrays(state_dict) -> dict[str, np.ndarray]:
    """Torch state_dict -> numpy arrays (float tensors stored as float32)."""
    out = {}
    for k, v in state_dict.items():
        a = v.detach().cpu().numpy()
        if a.dtype == np.float64:
            a = a.astype(np.float32)
        out[k] = a
    return out


def arrays_to_state_dict(arrays: dict[str, np.ndarray], prefix: str = ""):
    import torch

    return {
        k[len(prefix):]: torch.from_numpy(np.ascontiguousarray(v))
        for k, v in arrays.items()
        if k.startswith(prefix)
    }
