"""Small versioned binary container: magic + version + JSON metadata + raw arrays.

Used for codebooks and probe checkpoints. Array bytes are little-endian and
written in sorted-name order, so files are byte-reproducible.
"""

from __future__ import annotations

import json
import struct

import numpy as np

_DTYPES = {"f8": "<f8", "f4": "<f4", "i8": "<i8", "i4": "<i4"}


class FormatError(ValueError):
    """Raised when a binary file does not match the expected layout."""


def write_arrays(path, magic: bytes, version: int, meta: dict, arrays: dict) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    entries = []
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        code = arr.dtype.str.lstrip("<>=|")
        if code not in _DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype} for array {name!r}")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code})
        blobs.append(arr.astype(_DTYPES[code], copy=False).tobytes())
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", version))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def read_arrays(path, magic: bytes, version: int):
    """Return (meta, arrays); raises FormatError on any mismatch or truncation."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise FormatError(f"{path}: file too short for header")
    if raw[:4] != magic:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    (got_version,) = struct.unpack_from("<I", raw, 4)
    if got_version != version:
        raise FormatError(f"{path}: version {got_version}, expected {version}")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    if len(raw) < 12 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt header ({e})") from e
    offset = 12 + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated data for array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            raw[offset : offset + nbytes], dtype=dtype
        ).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return header["meta"], arrays
