"""Deterministic on-disk container for named arrays plus a JSON metadata block.

The format is intentionally boring: a magic string, a length-prefixed JSON
header, then the raw little-endian array bytes back to back in sorted name
order. Writing the same arrays and metadata twice produces byte-identical
files, which archive formats with embedded timestamps do not guarantee.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"WCPT\x00\x01"

__all__ = ["save_checkpoint", "load_checkpoint"]


def _normalize(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def save_checkpoint(path: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``arrays`` and ``meta`` to ``path``, creating parent directories."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = _normalize(np.asarray(arrays[name]))
        blob = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str.lstrip("<=|"),
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"arrays": entries, "meta": meta or {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back as ``(arrays, meta)``."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path} is not a checkpoint file")
    pos = len(MAGIC)
    (header_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if pos + header_len > len(raw):
        raise ValueError(f"{path} is truncated")
    header = json.loads(raw[pos:pos + header_len].decode("utf-8"))
    base = pos + header_len
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        stop = start + entry["nbytes"]
        if stop > len(raw):
            raise ValueError(f"{path} is truncated")
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        arr = np.frombuffer(raw[start:stop], dtype=dtype).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    return arrays, header["meta"]
