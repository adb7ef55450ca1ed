"""Binary parameter checkpoints.

Layout (all integers unsigned 32-bit little-endian)::

    b"SCLAB1"
    repeated until EOF:
        name_len, name (utf-8), rank, extents[rank], values (float64 LE, row-major)
"""

from __future__ import annotations

import os
import struct
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"SCLAB1"

__all__ = ["MAGIC", "CheckpointError", "save_checkpoint", "load_checkpoint",
           "dump_params", "restore_params"]


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    parts = [MAGIC]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos: pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
        if name in out:
            raise CheckpointError(f"{path}: duplicate parameter {name!r}")
        out[name] = values.reshape(shape)
    return out


def dump_params(params: Iterable) -> dict[str, np.ndarray]:
    return {p.name: p.value.copy() for p in params}


def restore_params(params: Iterable, arrays: Mapping[str, np.ndarray]) -> None:
    """Copy arrays into parameters by name; every parameter must be present."""
    for p in params:
        if p.name not in arrays:
            raise CheckpointError(f"missing parameter {p.name!r}")
        arr = arrays[p.name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{p.name}: shape {arr.shape} != expected {p.shape}")
        p.tensor.data[...] = arr
