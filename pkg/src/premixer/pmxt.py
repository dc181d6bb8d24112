"""PMXT binary tensor files.

Layout (all little-endian)::

    b"PMXT" | version u16 | rank u16 | dims u64 * rank | float32 payload | crc32 u32

The CRC covers every byte before it.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from premixer.errors import FormatError

MAGIC = b"PMXT"
VERSION = 1
_HEAD = struct.Struct("<4sHH")


def encode(array) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    body = _HEAD.pack(MAGIC, VERSION, arr.ndim)
    body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    body += arr.tobytes(order="C")
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < _HEAD.size:
        raise FormatError("truncated PMXT header", offset=len(buf))
    magic, version, rank = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported PMXT version {version}", offset=4)
    off = _HEAD.size
    if len(buf) < off + 8 * rank:
        raise FormatError("truncated PMXT dims", offset=len(buf))
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = off + 4 * count
    if len(buf) != end + 4:
        raise FormatError(
            f"payload size mismatch: dims {tuple(dims)} need {end + 4} bytes, file has {len(buf)}",
            offset=min(len(buf), end),
        )
    (crc,) = struct.unpack_from("<I", buf, end)
    if crc != (zlib.crc32(buf[:end]) & 0xFFFFFFFF):
        raise FormatError("CRC32 mismatch", offset=end)
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).copy()


def write(path, array) -> int:
    """Write ``array`` as PMXT; returns the stored CRC32."""
    data = encode(array)
    Path(path).write_bytes(data)
    return struct.unpack("<I", data[-4:])[0]


def read(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def read_crc(path) -> int:
    return struct.unpack("<I", Path(path).read_bytes()[-4:])[0]
