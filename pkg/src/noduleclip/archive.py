"""Flat tensor-archive file format.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
raw tensor bytes. The header maps each tensor name to shape/dtype/offset and
carries an optional free-form metadata dict. All data is little-endian;
float32 is the primary dtype (model weights), with a few extras allowed for
bookkeeping tensors.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NCARC001"

_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int64": np.dtype("<i8"),
    "int32": np.dtype("<i4"),
    "uint8": np.dtype("u1"),
    "bool": np.dtype("?"),
}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


def save_archive(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        shape = list(arr.shape)  # ascontiguousarray promotes 0-d to 1-d
        arr = np.ascontiguousarray(arr)
        key = _DTYPE_NAMES.get(arr.dtype.newbyteorder("<"))
        if key is None:
            key = _DTYPE_NAMES.get(np.dtype(arr.dtype.name))
        if key is None:
            raise ValueError(f"unsupported dtype {arr.dtype} for tensor '{name}'")
        arr = arr.astype(_DTYPES[key], copy=False)
        raw = arr.tobytes()
        entries[name] = {
            "shape": shape,
            "dtype": key,
            "offset": offset,
            "nbytes": len(raw),
        }
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}}).encode("utf-8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a tensor archive (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = fh.read()
    tensors = {}
    for name, entry in header["tensors"].items():
        dt = _DTYPES[entry["dtype"]]
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(data[start : start + nbytes], dtype=dt)
        tensors[name] = arr.reshape(entry["shape"]).copy()
    return tensors, header.get("meta", {})
