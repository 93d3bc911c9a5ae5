"""``.tamw`` weight files: magic, version, then named float32 tensors."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["CheckpointFormatError", "save_checkpoint", "load_checkpoint"]

MAGIC = b"TAMW"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointFormatError(f"{path}: truncated")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        out[name] = arr.astype(np.float64)
    if pos != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return out
