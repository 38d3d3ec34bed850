"""Versioned binary container used for checkpoints and datasets.

Layout::

    8 bytes   magic  b"ANESGAN\\0"
    4 bytes   format version (uint32, little endian)
    8 bytes   header length H (uint64, little endian)
    H bytes   UTF-8 JSON header, keys sorted
    ...       array payload, little-endian, C order, in header order

The header lists every array as ``{"name", "dtype", "shape", "offset",
"nbytes"}`` (offset relative to the payload start) plus ``payload_bytes`` and a
free-form ``meta`` object. Writing is deterministic: no timestamps, sorted keys.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ANESGAN\0"
VERSION = 1
_DTYPES = {"float64": "<f8", "int64": "<i8"}


class ContainerError(ValueError):
    pass


def write_container(path: str | os.PathLike, kind: str, arrays: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):  # canonical order: equal content gives equal bytes
        arr = np.asarray(arrays[name])
        if arr.dtype.kind == "f":
            dtype = "float64"
        elif arr.dtype.kind in "iub":
            dtype = "int64"
        else:
            raise ContainerError(f"array {name!r}: unsupported dtype {arr.dtype}")
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {"kind": kind, "version": VERSION, "arrays": entries,
              "payload_bytes": offset, "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(hbytes)))
        fh.write(hbytes)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_header(path: str | os.PathLike) -> tuple[dict, int]:
    """Return (header, payload_start)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ContainerError(f"{path}: not an anesgan container")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != VERSION:
            raise ContainerError(f"{path}: unsupported container version {version}")
        header = json.loads(fh.read(hlen).decode())
    return header, len(MAGIC) + 12 + hlen


def read_container(path: str | os.PathLike, kind: str | None = None
                   ) -> tuple[dict[str, np.ndarray], dict]:
    header, start = read_header(path)
    if kind is not None and header["kind"] != kind:
        raise ContainerError(f"{path}: expected a {kind!r} container, found {header['kind']!r}")
    size = os.path.getsize(path)
    if size != start + header["payload_bytes"]:
        raise ContainerError(
            f"{path}: size {size} does not match header ({start} + {header['payload_bytes']})")
    arrays = {}
    with open(path, "rb") as fh:
        fh.seek(start)
        payload = fh.read()
    for e in header["arrays"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(np.float64 if e["dtype"] == "float64" else np.int64)
    return arrays, header["meta"]
