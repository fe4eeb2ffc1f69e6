"""Framed little-endian binary containers shared by the checkpoint formats.

Layout: ``magic (4 bytes) | u32 version | payload | u32 crc32``, where the
CRC covers everything before it.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import CorruptionError, FormatError


class Writer:
    def __init__(self, magic: bytes, version: int):
        self._parts = [magic, struct.pack("<I", version)]

    def u32(self, x: int):
        self._parts.append(struct.pack("<I", x))

    def i64(self, x: int):
        self._parts.append(struct.pack("<q", x))

    def f64(self, x: float):
        self._parts.append(struct.pack("<d", x))

    def text(self, s: str):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self._parts.append(raw)

    def array(self, a: np.ndarray, dtype: str):
        a = np.asarray(a, dtype=dtype, order="C")  # keeps 0-d arrays 0-d
        self.u32(a.ndim)
        for d in a.shape:
            self.u32(d)
        self._parts.append(a.astype(np.dtype(dtype).newbyteorder("<"), copy=False).tobytes())

    def finish(self) -> bytes:
        body = b"".join(self._parts)
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class Reader:
    def __init__(self, data: bytes, magic: bytes, versions: tuple[int, ...]):
        data = bytes(data)
        if len(data) < 4 or data[:4] != magic:
            raise FormatError(f"bad magic: expected {magic!r}, found {data[:4]!r}")
        if len(data) < 12:
            raise CorruptionError("stream truncated")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        (version,) = struct.unpack_from("<I", body, 4)
        if version not in versions:
            raise FormatError(f"unsupported {magic.decode()} version {version}")
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise CorruptionError("checksum mismatch")
        self.version = version
        self._buf = body
        self._pos = 8

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._buf):
            raise CorruptionError("stream truncated")
        out = self._buf[self._pos:self._pos + n]
        self._pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def text(self) -> str:
        return self._take(self.u32()).decode("utf-8")

    def array(self, dtype: str) -> np.ndarray:
        ndim = self.u32()
        shape = tuple(self.u32() for _ in range(ndim))
        dt = np.dtype(dtype).newbyteorder("<")
        n = int(np.prod(shape)) if shape else 1
        raw = self._take(n * dt.itemsize)
        return np.frombuffer(raw, dtype=dt).astype(dtype).reshape(shape)

    def done(self):
        if self._pos != len(self._buf):
            raise CorruptionError(f"{len(self._buf) - self._pos} trailing bytes")
