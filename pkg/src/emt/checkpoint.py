"""Checkpoint files: versioned header, named-tensor table, raw little-endian payloads.

Layout::

    magic  b"EMTCKPT\\0"   8 bytes
    version               u32
    table length          u64   (bytes of UTF-8 JSON that follow)
    table JSON            {"tensors": [{name, dtype, shape, offset, nbytes}], "meta": {...}}
    payload               tensors back to back, offsets relative to payload start
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"EMTCKPT\0"
VERSION = 1
_HEAD = struct.Struct("<8sIQ")
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "u1": np.dtype("u1"), "i8": np.dtype("<i8")}
_TORCH_TO_CODE = {torch.float32: "f4", torch.float64: "f8", torch.uint8: "u1", torch.int64: "i8"}


class CheckpointError(Exception):
    pass


class ConfigMismatchError(CheckpointError):
    """The checkpoint was written under a different configuration."""


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor | np.ndarray],
                    meta: dict) -> str:
    """Write tensors in insertion order; returns the SHA-256 of the file."""
    table, chunks, offset = [], [], 0
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu()
            code = _TORCH_TO_CODE.get(value.dtype)
            if code is None:
                raise CheckpointError(f"{name}: unsupported dtype {value.dtype}")
            arr = value.numpy()
        else:
            arr = np.asarray(value)
            code = next((c for c, d in _DTYPES.items() if d == arr.dtype.newbyteorder("<")), None)
            if code is None:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        table.append({"name": name, "dtype": code, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    head = json.dumps({"tensors": table, "meta": meta}, sort_keys=True).encode("utf-8")
    data = _HEAD.pack(MAGIC, VERSION, len(head)) + head + b"".join(chunks)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise CheckpointError(f"{path}: truncated")
    magic, version, n_head = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    table = json.loads(raw[_HEAD.size:_HEAD.size + n_head].decode("utf-8"))
    base = _HEAD.size + n_head
    tensors = {}
    for t in table["tensors"]:
        start = base + t["offset"]
        if start + t["nbytes"] > len(raw):
            raise CheckpointError(f"{path}: tensor {t['name']} runs past end of file")
        arr = np.frombuffer(raw, _DTYPES[t["dtype"]], count=int(np.prod(t["shape"], dtype=np.int64)),
                            offset=start).reshape(t["shape"])
        tensors[t["name"]] = torch.from_numpy(arr.copy())
    return tensors, table["meta"]


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
