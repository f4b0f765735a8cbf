"""EOT1 binary tensor format.

A tensor is encoded as::

    b"EOT1" | u32 rank | u32 extents[rank] | f32 payload (row-major)

all little-endian. A checkpoint is a concatenation of records::

    u32 name_length | UTF-8 name | tensor

read until end of file. Values are stored as float32, so anything written and
read back is rounded to single precision; callers that need reproducibility
from disk alone should always reload what they wrote.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np

from .errors import FormatError

MAGIC = b"EOT1"
_U32 = struct.Struct("<I")


def encode_tensor(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    header = MAGIC + _U32.pack(arr.ndim) + b"".join(_U32.pack(int(e)) for e in arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (float64 array, next offset)."""
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[offset:offset + 4])!r}, expected {MAGIC!r}", offset)
    pos = offset + 4
    rank = _read_u32(buf, pos)
    pos += 4
    extents = []
    for _ in range(rank):
        extents.append(_read_u32(buf, pos))
        pos += 4
    count = int(np.prod(extents, dtype=np.int64))
    end = pos + 4 * count
    if end > len(buf):
        raise FormatError(f"truncated payload: need {4 * count} bytes, have {len(buf) - pos}", pos)
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float64)
    return data.reshape(extents), end


def _read_u32(buf: bytes, pos: int) -> int:
    if pos + 4 > len(buf):
        raise FormatError("truncated header", pos)
    return _U32.unpack_from(buf, pos)[0]


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = []
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts.append(_U32.pack(len(raw)) + raw + encode_tensor(arr))
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    pos = 0
    while pos < len(buf):
        n = _read_u32(buf, pos)
        pos += 4
        if pos + n > len(buf):
            raise FormatError("truncated record name", pos)
        try:
            name = bytes(buf[pos : pos + n]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"record name is not UTF-8: {exc}", pos) from None
        pos += n
        if name in out:
            raise FormatError(f"duplicate record {name!r}", pos - n)
        out[name], pos = decode_tensor(buf, pos)
    return out


def atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_tensor(path, array: np.ndarray) -> None:
    atomic_write(Path(path), encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after tensor", end)
    return arr


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write(Path(path), encode_checkpoint(tensors))


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
