"""Minimal binary container: magic, JSON header, raw arrays.

Layout: an 8-byte magic, an 8-byte big-endian header length, a UTF-8
JSON header, then each array's C-order bytes back to back. The header
records array names, dtypes and shapes plus a free-form ``meta`` dict.
Only a small dtype whitelist is accepted so a hostile file cannot
smuggle object arrays in.
"""

import json
import struct

import numpy as np

HEADER_STRUCT = struct.Struct(">Q")
ALLOWED_DTYPES = ("float64", "int64", "uint8")


class ContainerError(ValueError):
    """The file is not a valid container of the expected kind."""


def write_container(path, magic, meta, arrays):
    """Write ``arrays`` (an ordered name -> ndarray dict) under ``magic``."""
    if len(magic) != 8:
        raise ContainerError("magic must be exactly 8 bytes")
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.name not in ALLOWED_DTYPES:
            raise ContainerError(f"dtype {arr.dtype.name} not allowed in container")
        entries.append({"name": name, "dtype": arr.dtype.name,
                        "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps({"meta": meta, "arrays": entries},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(HEADER_STRUCT.pack(len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def read_container(path, magic):
    """Read a container written by ``write_container``; returns (meta, arrays)."""
    with open(path, "rb") as f:
        got = f.read(8)
        if got != magic:
            raise ContainerError(
                f"bad magic: expected {magic!r}, found {got!r}")
        raw_len = f.read(8)
        if len(raw_len) != 8:
            raise ContainerError("truncated container header length")
        (header_len,) = HEADER_STRUCT.unpack(raw_len)
        raw_header = f.read(header_len)
        if len(raw_header) != header_len:
            raise ContainerError("truncated container header")
        try:
            header = json.loads(raw_header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ContainerError(f"unreadable container header: {e}") from e
        arrays = {}
        for entry in header["arrays"]:
            dtype = entry["dtype"]
            if dtype not in ALLOWED_DTYPES:
                raise ContainerError(f"dtype {dtype} not allowed in container")
            shape = tuple(int(s) for s in entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            blob = f.read(count * np.dtype(dtype).itemsize)
            if len(blob) != count * np.dtype(dtype).itemsize:
                raise ContainerError(f"truncated array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(
                blob, dtype=dtype).reshape(shape).copy()
        return header["meta"], arrays
