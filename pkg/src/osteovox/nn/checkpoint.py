"""Named-tensor checkpoint format ("OVXW").

Layout (little-endian): magic ``OVXW``, version u32, tensor count u32, then
per tensor: name length u32, UTF-8 name, rank u32, rank x u32 dims, f32 data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"OVXW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_tensors(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict:
    def need(offset, count, what):
        if offset + count > len(buf):
            raise CheckpointError(f"truncated checkpoint reading {what} at byte {offset}")

    need(0, 12, "header")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        need(off, 4, "name length")
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(off, nlen, "name")
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        need(off, 4, f"rank of {name}")
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(off, 4 * rank, f"dims of {name}")
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        need(off, nbytes, f"data of {name}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off).reshape(dims).astype(np.float32)
        off += nbytes
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes after {count} tensors")
    return out


def save_tensors(tensors: dict, path) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def load_tensors(path) -> dict:
    return decode_tensors(Path(path).read_bytes())
