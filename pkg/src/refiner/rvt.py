"""RVT1 tensor file format.

Layout: magic ``RVT1``, one u8 dtype tag (0 = float32, 1 = float64), one u8
rank, then rank little-endian u32 extents, then the row-major little-endian
payload. Used for weights, images and attention dumps.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAGIC = b"RVT1"

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_rvt(path: str | Path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype not in _TAG_FOR_KIND:
        raise ConfigError(f"RVT1 stores float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise ConfigError("RVT1 rank limit is 255")
    tag = _TAG_FOR_KIND[arr.dtype]
    header = MAGIC + struct.pack("<BB", tag, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr).astype(_DTYPE_TAGS[tag], copy=False).tobytes()
    Path(path).write_bytes(header + payload)


def read_rvt(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise ConfigError(f"{path}: not an RVT1 file")
    tag, ndim = struct.unpack_from("<BB", raw, 4)
    if tag not in _DTYPE_TAGS:
        raise ConfigError(f"{path}: unknown dtype tag {tag}")
    offset = 6
    shape = struct.unpack_from(f"<{ndim}I", raw, offset)
    offset += 4 * ndim
    dtype = _DTYPE_TAGS[tag]
    count = int(np.prod(shape)) if ndim else 1
    expected = offset + count * dtype.itemsize
    if len(raw) != expected:
        raise ConfigError(f"{path}: payload size {len(raw) - offset} does not match "
                          f"shape {shape}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    return data.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
