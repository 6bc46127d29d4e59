"""Little-endian float payload files shared by checkpoints and expert spill files."""

from __future__ import annotations

import os
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


def encode_array(arr: np.ndarray, dtype: str) -> bytes:
    # astype rounds to nearest-even when narrowing to f4.
    return np.ascontiguousarray(arr, dtype=np.float64).astype(DTYPES[dtype]).tobytes()


def write_arrays(fh: BinaryIO, arrays: Iterable[np.ndarray], dtype: str) -> list[int]:
    """Append arrays back to back; returns the byte offset of each one."""
    offsets = []
    pos = fh.tell()
    for arr in arrays:
        offsets.append(pos)
        blob = encode_array(arr, dtype)
        fh.write(blob)
        pos += len(blob)
    return offsets


def read_array(path: str | Path, offset: int, shape: tuple[int, ...], dtype: str) -> np.ndarray:
    dt = DTYPES[dtype]
    count = int(np.prod(shape, dtype=np.int64))
    with open(path, "rb") as fh:
        fh.seek(offset)
        raw = fh.read(count * dt.itemsize)
    if len(raw) != count * dt.itemsize:
        raise EOFError(f"{path}: expected {count * dt.itemsize} bytes at offset {offset}, got {len(raw)}")
    return np.frombuffer(raw, dtype=dt).astype(np.float64).reshape(shape)


def fsync_write(path: str | Path, data: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
