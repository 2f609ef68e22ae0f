"""Binary container for one (Q, K, V) instance.

Layout, little-endian throughout:

    offset  size  field
    0       4     magic b"QKVT"
    4       2     format version, currently 1
    6       1     dtype code: 0 = float64, 1 = float32
    7       1     reserved, must be 0
    8       24    six u32: q rows, q cols, k rows, k cols, v rows, v cols
    32      ...   Q payload, then K, then V, row-major, no padding

The header is exactly 32 bytes. Readers reject wrong magic, unknown
versions, unknown dtype codes, truncated payloads, and trailing bytes,
each with a distinct message.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"QKVT"
VERSION = 1
HEADER = struct.Struct("<4sHBB6I")

_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODE_FOR_KIND = {"double": 0, "single": 1}


class TensorFormatError(ValueError):
    """Raised when a tensor container is malformed."""


def write_tensor_file(path, q, k, v, *, precision: str = "double") -> None:
    """Serialize three 2-D arrays. `precision` is 'double' or 'single'."""
    if precision not in _CODE_FOR_KIND:
        raise ValueError(f"precision must be 'double' or 'single', got {precision!r}")
    code = _CODE_FOR_KIND[precision]
    dtype = _DTYPE_CODES[code]
    arrays = []
    for name, arr in (("q", q), ("k", k), ("v", v)):
        arr = np.ascontiguousarray(arr, dtype=dtype)
        if arr.ndim != 2:
            raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
        arrays.append(arr)
    dims = []
    for arr in arrays:
        dims.extend(arr.shape)
    header = HEADER.pack(MAGIC, VERSION, code, 0, *dims)
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in arrays:
            fh.write(arr.tobytes())


def read_tensor_file(path):
    """Deserialize (q, k, v). Raises TensorFormatError on any defect."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < HEADER.size:
        raise TensorFormatError(
            f"file too short for header: {len(blob)} bytes, need {HEADER.size}"
        )
    magic, version, code, reserved, *dims = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise TensorFormatError(f"unsupported format version {version}")
    if code not in _DTYPE_CODES:
        raise TensorFormatError(f"unknown dtype code {code}")
    if reserved != 0:
        raise TensorFormatError(f"reserved header byte is {reserved}, expected 0")
    dtype = _DTYPE_CODES[code]
    shapes = [(dims[0], dims[1]), (dims[2], dims[3]), (dims[4], dims[5])]
    expected = HEADER.size + sum(r * c for r, c in shapes) * dtype.itemsize
    if len(blob) < expected:
        raise TensorFormatError(
            f"payload size mismatch: have {len(blob)} bytes, header implies {expected}"
        )
    if len(blob) > expected:
        raise TensorFormatError(
            f"trailing bytes after payload: {len(blob) - expected}"
        )
    out = []
    offset = HEADER.size
    for rows, cols in shapes:
        count = rows * cols
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
        out.append(arr.reshape(rows, cols).copy())
        offset += count * dtype.itemsize
    return tuple(out)
