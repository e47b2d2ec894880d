"""Binary tensor container ("LPTF") and named-tensor archives.

Container layout: magic ``b"LPTF"``, version byte 0x01, dtype byte 0x01
(little-endian float64), rank as u32 LE, each extent as u32 LE, then the
row-major payload.  An archive is a u32 count followed by repeated
(u32 name length, UTF-8 name, embedded container).
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"LPTF"
VERSION = 0x01
DTYPE_F64 = 0x01


class FormatError(ValueError):
    pass


def write_tensor(fh: BinaryIO, array) -> None:
    arr = np.asarray(array, dtype="<f8", order="C")
    fh.write(MAGIC)
    fh.write(bytes([VERSION, DTYPE_F64]))
    fh.write(struct.pack("<I", arr.ndim))
    for n in arr.shape:
        fh.write(struct.pack("<I", n))
    fh.write(arr.tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated tensor stream")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    if _read_exact(fh, 4) != MAGIC:
        raise FormatError("bad magic bytes")
    version, dtype = _read_exact(fh, 2)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    if dtype != DTYPE_F64:
        raise FormatError(f"unsupported dtype code {dtype}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    count = int(np.prod(shape, dtype=np.int64))
    payload = _read_exact(fh, 8 * count)
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def tensor_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def save_archive(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named tensors in the given mapping order."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            write_tensor(fh, arr)


def load_archive(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(Path(path), "rb") as fh:
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        for _ in range(count):
            (n,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, n).decode("utf-8")
            out[name] = read_tensor(fh)
        if fh.read(1):
            raise FormatError("trailing bytes after archive")
    return out
