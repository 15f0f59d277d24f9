"""Binary container for named float32 arrays.

Layout (little-endian)::

    b"LRXF"  u16 version  u32 count
    count x { u16 name_len, name (utf-8), u8 dtype (0 = f32), u8 ndim,
              u32 dims[ndim], u64 nbytes, payload }
    u32 crc32 of everything before it
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"LRXF"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def dumps(arrays: dict[str, np.ndarray], version: int = VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<HI", version, len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", 0, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = arr.tobytes()
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise CorruptCheckpointError("bad magic; not an LRXF checkpoint")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {VERSION}")
    if len(blob) < 14:
        raise CorruptCheckpointError("truncated header")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError("checksum mismatch (truncated or corrupt payload)")
    (count,) = struct.unpack_from("<I", body, 6)
    pos = 10
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            dtype, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            if dtype != 0:
                raise CorruptCheckpointError(f"unknown dtype code {dtype} for {name}")
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            (nbytes,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            if nbytes != 4 * int(np.prod(shape, dtype=np.int64)) or pos + nbytes > len(body):
                raise CorruptCheckpointError(f"payload size mismatch for {name}")
            out[name] = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).copy()
            pos += nbytes
    except struct.error as exc:
        raise CorruptCheckpointError(f"truncated record: {exc}") from None
    if pos != len(body):
        raise CorruptCheckpointError("trailing bytes after last record")
    return out


def save(path, arrays: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(dumps(arrays))


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
