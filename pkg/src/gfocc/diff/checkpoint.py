"""Binary parameter checkpoints ("GFWT").

Layout (little-endian): magic ``GFWT``, u32 version, u32 tensor count, then
per tensor: u32 name length, utf-8 name, u32 rank, rank x u32 dims, f32 data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GFWT"
VERSION = 1


class FormatError(ValueError):
    pass


def write_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        count_el = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count_el, offset=off).reshape(dims)
        off += 4 * count_el
        out[name] = arr.astype(np.float32)
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    return out
