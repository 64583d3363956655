"""Binary checkpoint container.

Layout: magic ``MSFC``, format version u32, entry count u32, then per
entry a u16 name length, UTF-8 name, u8 dim count, u64 dims, and raw
little-endian float32 data.  Round-trips are bit-exact at 32-bit.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"MSFC"
VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays; values are stored as float32."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(arrays))
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", data.ndim)
        blob += struct.pack(f"<{data.ndim}Q", *data.shape)
        blob += data.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a container written by :func:`save_checkpoint`."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ParseError(f"{path}: bad magic")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ParseError(f"{path}: unsupported format version {version}")
    offset = 12
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}Q", raw, offset)
        offset += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=offset)
        offset += 4 * size
        arrays[name] = arr.reshape(shape).copy()
    if offset != len(raw):
        raise ParseError(f"{path}: trailing bytes after last entry")
    return arrays


def file_checksum(path) -> str:
    """SHA-256 of a file, used to tie pipeline stages together."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
