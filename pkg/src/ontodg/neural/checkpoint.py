"""Binary parameter checkpoints.

Layout (little endian): magic ``ODGCKPT1``, uint32 version, uint32 block
count, then per block: uint16 name length, UTF-8 name, uint32 ndim, ndim x
uint32 shape, float64 data in C order. Blocks keep declaration order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ODGCKPT1"
VERSION = 1


def save_params(path: str | Path, blocks: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blocks)))
        for name, arr in blocks.items():
            b = name.encode("utf-8")
            a = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<H", len(b)) + b)
            fh.write(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def load_params(path: str | Path) -> dict:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(float)
        off += 8 * size
    return out
