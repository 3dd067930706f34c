"""Binary and CSV serialization for flat float arrays.

The on-disk binary layout is fixed so datasets remain language neutral:
magic ``EITB``, format version as u32, element count as u64, then the
payload as little-endian float64. Readers reject anything else.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError

_MAGIC = b"EITB"
_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


def write_array(values, path) -> None:
    """Write a 1-D float64 array to ``path`` in the EITB layout."""
    arr = np.ascontiguousarray(values, dtype="<f8")
    if arr.ndim != 1:
        raise DataFormatError(f"EITB stores flat arrays, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, arr.size))
        fh.write(arr.tobytes())


def read_array(path) -> np.ndarray:
    """Read an EITB file back into a float64 array, verifying the header."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, count = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    payload = raw[_HEADER.size:]
    if len(payload) != 8 * count:
        raise DataFormatError(
            f"{path}: payload holds {len(payload)} bytes, header promises {8 * count}"
        )
    return np.frombuffer(payload, dtype="<f8").astype(np.float64)


def write_csv(values, path) -> None:
    """Mirror a per-vertex array as CSV with header ``vertex_index,value``."""
    arr = np.asarray(values, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["vertex_index", "value"])
        for i, v in enumerate(arr):
            writer.writerow([i, repr(float(v))])


def read_csv(path) -> np.ndarray:
    """Read a ``vertex_index,value`` CSV produced by :func:`write_csv`."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["vertex_index", "value"]:
        raise DataFormatError(f"{path}: expected header 'vertex_index,value'")
    out = np.empty(len(rows) - 1, dtype=np.float64)
    for k, row in enumerate(rows[1:]):
        if int(row[0]) != k:
            raise DataFormatError(f"{path}: vertex indices not contiguous at row {k}")
        out[k] = float(row[1])
    return out
