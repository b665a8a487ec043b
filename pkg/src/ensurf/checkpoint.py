"""Versioned binary container for named arrays plus JSON metadata.

Layout: 8-byte magic, u32 format version, u64 header length, UTF-8 JSON header
(sorted keys; holds metadata and an array table of name/dtype/shape/offset),
then the raw little-endian array payloads in table order.  Writing the same
content twice yields identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import VersionError

MAGIC = b"ENSCKPT\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save(path, arrays: dict, meta: dict) -> None:
    table = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dt = arr.dtype.newbyteorder("<")
        blob = np.ascontiguousarray(arr, dtype=dt).tobytes()
        table.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load(path):
    """Return ``(arrays, meta)``."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise VersionError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise VersionError(f"{path}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: checkpoint format {version}, expected {FORMAT_VERSION}")
    header = json.loads(data[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    base = _PREFIX.size + hlen
    arrays = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype=dt, count=count, offset=base + entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(dt.newbyteorder("="))
    return arrays, header["meta"]
