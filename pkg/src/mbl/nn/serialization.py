"""Tensor container file: one JSON header line, then raw little-endian bytes.

Layout::

    MBLT1\\n
    {"tensors": [{"name": ..., "shape": [...], "dtype": "<f8"}, ...], "meta": {...}}\\n
    <bytes of tensor 0><bytes of tensor 1>...

Tensors are stored C-ordered in header order. ``meta`` is free-form JSON.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MBLT1\n"


class CheckpointFormatError(ValueError):
    pass


def write_tensors(path: str | Path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str})
        blobs.append(np.ascontiguousarray(le).tobytes())
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def read_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointFormatError(f"{path}: not a tensor file (bad magic {magic!r})")
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(payload):
            raise CheckpointFormatError(f"{path}: truncated payload at tensor {entry['name']!r}")
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(dtype.newbyteorder("="), copy=True)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointFormatError(f"{path}: {len(payload) - offset} trailing bytes after last tensor")
    return tensors, header.get("meta", {})
