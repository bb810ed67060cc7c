"""Binary tensor container: the one on-disk array format.

Layout (all little-endian):

    magic   4 bytes  b"PCSR"
    version 1 byte   0x01
    dtype   1 byte   0x00 (float32, the only defined dtype)
    rank    1 byte
    dims    rank * u32
    payload product(dims) * f32, row-major

Round trips are bit-exact.
"""

from __future__ import annotations

import struct
from io import BufferedIOBase
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError

MAGIC = b"PCSR"
VERSION = 1
DTYPE_F32 = 0
MAX_RANK = 8


def write_tensor(fp: BufferedIOBase, array: np.ndarray):
    """Append one tensor blob to an open binary stream."""
    arr = np.asarray(array, order="C")  # ascontiguousarray would promote rank 0 to rank 1
    if arr.dtype != np.float32:
        raise ContractError(f"container stores float32 only, got {arr.dtype}")
    if arr.ndim > MAX_RANK:
        raise ContractError(f"container rank limit is {MAX_RANK}, got {arr.ndim}")
    fp.write(MAGIC)
    fp.write(struct.pack("<BB", VERSION, DTYPE_F32))
    fp.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fp.write(struct.pack("<I", d))
    fp.write(arr.tobytes(order="C"))


def read_tensor(fp: BufferedIOBase) -> np.ndarray:
    """Read one tensor blob from an open binary stream."""
    head = fp.read(4)
    if len(head) < 4:
        raise FormatError("tensor container truncated in magic")
    if head != MAGIC:
        raise FormatError(f"bad tensor container magic {head!r}, expected {MAGIC!r}")
    meta = fp.read(3)
    if len(meta) < 3:
        raise FormatError("tensor container truncated in header")
    version, dtype, rank = struct.unpack("<BBB", meta)
    if version != VERSION:
        raise FormatError(f"unsupported tensor container version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported tensor container dtype byte {dtype}")
    if rank > MAX_RANK:
        raise FormatError(f"tensor container rank {rank} exceeds limit {MAX_RANK}")
    raw = fp.read(4 * rank)
    if len(raw) < 4 * rank:
        raise FormatError("tensor container truncated in dims")
    dims = struct.unpack(f"<{rank}I", raw) if rank else ()
    if any(d == 0 for d in dims):
        raise FormatError(f"tensor container dims must be positive, got {list(dims)}")
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = fp.read(4 * count)
    if len(payload) < 4 * count:
        raise FormatError(
            f"tensor container truncated in payload: expected {4 * count} bytes, got {len(payload)}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save_tensor(path: str | Path, array: np.ndarray):
    with open(path, "wb") as fp:
        write_tensor(fp, array)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fp:
        arr = read_tensor(fp)
        trailing = fp.read(1)
    if trailing:
        raise FormatError(f"trailing bytes after tensor payload in {path}")
    return arr
