"""Binary checkpoint format for named float arrays.

Layout (little-endian)::

    b"LEAP"  u32 version
    repeated until EOF:
        u32 name_length, name bytes (utf-8), u32 rank, u32 dims[rank],
        float32 data (row-major, prod(dims) values)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"LEAP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    if len(buf) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos, out = 8, {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(buf):
                raise CheckpointError(f"{path}: truncated data for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos += 4 * count
    except struct.error:
        raise CheckpointError(f"{path}: truncated record") from None
    return out
