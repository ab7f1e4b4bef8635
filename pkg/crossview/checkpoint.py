"""
Checkpoint container shared by the model, optimizer and pipeline.

Layout (all integers 64-bit little-endian):
    b"TGCKPT1\\n", count,
    then per array: name length, name bytes (utf-8), rank, extents...,
    raw float32 little-endian payload.
"""

import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from .errors import FormatError

MAGIC = b"TGCKPT1\n"
_U64 = struct.Struct("<Q")


def save_checkpoint(path: Union[str, Path], arrays: Dict[str, np.ndarray]):
    """Write arrays in insertion order; values are stored as float32"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, _U64.pack(len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(_U64.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U64.pack(arr.ndim))
        chunks.extend(_U64.pack(extent) for extent in arr.shape)
        chunks.append(np.ascontiguousarray(arr).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(MAGIC):
        raise FormatError(f"{path}: bad checkpoint magic")

    pos = len(MAGIC)

    def read_u64() -> int:
        nonlocal pos
        if pos + 8 > len(blob):
            raise FormatError(f"{path}: truncated checkpoint")
        (value,) = _U64.unpack_from(blob, pos)
        pos += 8
        return value

    arrays: Dict[str, np.ndarray] = {}
    for _ in range(read_u64()):
        name_len = read_u64()
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        rank = read_u64()
        shape = tuple(read_u64() for _ in range(rank))
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if pos + nbytes > len(blob):
            raise FormatError(f"{path}: truncated payload for '{name}'")
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return arrays
