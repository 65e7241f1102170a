"""Little-endian packing helpers shared by the PFD1 and PFC1 containers.

Both containers end with a CRC32 (zlib polynomial) of every preceding byte.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import FormatError


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def raw(self, b: bytes) -> None:
        self._parts.append(b)

    def pack(self, fmt: str, *values) -> None:
        self._parts.append(struct.pack("<" + fmt, *values))

    def string(self, s: str) -> None:
        b = s.encode("utf-8")
        self.pack("H", len(b))
        self.raw(b)

    def f32(self, a: np.ndarray) -> None:
        self.raw(np.ascontiguousarray(a, dtype="<f4").tobytes())

    def u8(self, a: np.ndarray) -> None:
        self.raw(np.ascontiguousarray(a, dtype=np.uint8).tobytes())

    def finish(self) -> bytes:
        body = b"".join(self._parts)
        return body + struct.pack("<I", zlib.crc32(body))


class Reader:
    def __init__(self, data: bytes, magic: bytes, version: int, what: str):
        self.what = what
        if len(data) < len(magic) or data[:len(magic)] != magic:
            raise FormatError(f"{what}: bad magic {data[:len(magic)]!r}, expected {magic!r}",
                              "bad-magic")
        self.data = data
        self.pos = len(magic)
        found = self.unpack("H")[0]
        if found != version:
            raise FormatError(f"{what}: version {found} not supported (expected {version})",
                              "version-mismatch")

    def _take(self, n: int) -> bytes:
        # The last 4 bytes are the CRC trailer.
        if self.pos + n > len(self.data) - 4:
            raise FormatError(
                f"{self.what}: truncated at byte {self.pos} (needed {n} more bytes, "
                f"file has {len(self.data)})", "truncated")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self._take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("H")
        try:
            return self._take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{self.what}: invalid utf-8 string: {e}", "malformed") from None

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self._take(4 * count), dtype="<f4").astype(np.float64)

    def u8(self, count: int) -> np.ndarray:
        return np.frombuffer(self._take(count), dtype=np.uint8).copy()

    def finish(self) -> None:
        remaining = len(self.data) - self.pos
        if remaining < 4:
            raise FormatError(f"{self.what}: truncated checksum trailer", "truncated")
        if remaining > 4:
            raise FormatError(f"{self.what}: {remaining - 4} unexpected trailing bytes",
                              "malformed")
        (stored,) = struct.unpack("<I", self.data[self.pos:])
        actual = zlib.crc32(self.data[:self.pos])
        if stored != actual:
            raise FormatError(
                f"{self.what}: checksum mismatch (stored {stored:08x}, computed {actual:08x})",
                "checksum")

