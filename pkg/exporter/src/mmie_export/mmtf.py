"""Independent writer for the MMTF interchange format.

Layout (shared contract with the mmie engine): magic "MMTF" | version u8=1 |
dtype u8=1 (float32) | rank u8=2 | dims 2 x u32 LE | row-major LE float32
payload. Kept dependency-free of the engine so the two sides exercise the
format contract rather than shared code.
"""

import struct

import numpy as np

_HEADER = struct.Struct("<4sBBBII")


def write_tensor_file(values: np.ndarray, path) -> None:
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"tensor files hold rank-2 data, got shape {arr.shape}")
    rows, cols = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(b"MMTF", 1, 1, 2, rows, cols))
        fh.write(arr.tobytes(order="C"))
