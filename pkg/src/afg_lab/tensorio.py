"""Per-sample binary tensor container.

Layout (little-endian)::

    b"AFG1" | u8 rank | u32 dim * rank | float32 payload | u32 CRC32

The CRC covers every byte before it.
"""
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError, IntegrityError

MAGIC = b"AFG1"


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr, dtype="<f4")
    head = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    body = head + arr.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensor(buf: bytes, name: str = "<buffer>") -> np.ndarray:
    if len(buf) < 9 or buf[:4] != MAGIC:
        raise FormatError(f"{name}: bad magic or truncated header")
    rank = buf[4]
    off = 5 + 4 * rank
    if len(buf) < off + 4:
        raise FormatError(f"{name}: truncated header")
    dims = struct.unpack(f"<{rank}I", buf[5:off])
    count = int(np.prod(dims)) if rank else 1
    end = off + 4 * count
    if len(buf) != end + 4:
        raise FormatError(f"{name}: payload length {len(buf) - off - 4} != {4 * count}")
    (crc,) = struct.unpack("<I", buf[end:])
    if zlib.crc32(buf[:end]) != crc:
        raise IntegrityError(f"{name}: CRC mismatch")
    return np.frombuffer(buf[off:end], dtype="<f4").reshape(dims).astype(np.float32)


def write_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    return decode_tensor(path.read_bytes(), str(path))
