"""Binary tensor interchange format (MMTF).

Layout: magic "MMTF" | version u8=1 | dtype u8 (1 = float32) | rank u8=2 |
dims 2 x u32 little-endian | payload row-major little-endian float32.
Write-then-read round-trips bitwise; this is the on-disk contract shared
with external feature exporters and checkpoints.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"MMTF"
VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sBBBII")


def write_tensor_file(values: np.ndarray, path) -> None:
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise FormatError(f"tensor files hold rank-2 data, got shape {arr.shape}")
    rows, cols = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, DTYPE_F32, 2, rows, cols))
        fh.write(arr.tobytes(order="C"))


def read_tensor_file(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, dtype, rank, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    if rank != 2:
        raise FormatError(f"{path}: unsupported rank {rank}")
    payload = raw[_HEADER.size:]
    expected = rows * cols * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()
