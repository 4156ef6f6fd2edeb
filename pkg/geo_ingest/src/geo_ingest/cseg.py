"""Minimal CSEG tensor writer/reader.

Wire format: magic "CSEG", version byte 1, dtype code byte
(0 = uint8, 1 = uint16, 2 = float32), ndim byte (1..4), ndim
little-endian uint32 dims, then the row-major little-endian payload.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"CSEG"
VERSION = 1
CODE_FOR_DTYPE = {
    np.dtype(np.uint8): 0,
    np.dtype(np.uint16): 1,
    np.dtype(np.float32): 2,
}
DTYPE_FOR_CODE = {v: k for k, v in CODE_FOR_DTYPE.items()}


def save_tensor(arr, path):
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in CODE_FOR_DTYPE:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    if not 1 <= arr.ndim <= 4:
        raise ValueError(f"ndim must be 1..4, got {arr.ndim}")
    header = MAGIC + bytes([VERSION, CODE_FOR_DTYPE[arr.dtype], arr.ndim])
    header += b"".join(struct.pack("<I", d) for d in arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(header + payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_tensor(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC or raw[4] != VERSION:
        raise ValueError(f"{path}: not a CSEG v{VERSION} file")
    code, ndim = raw[5], raw[6]
    dims = struct.unpack(f"<{ndim}I", raw[7 : 7 + 4 * ndim])
    dtype = DTYPE_FOR_CODE[code]
    return np.frombuffer(
        raw, dtype=dtype.newbyteorder("<"), offset=7 + 4 * ndim
    ).reshape(dims).astype(dtype)
