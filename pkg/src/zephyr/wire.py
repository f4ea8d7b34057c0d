"""Binary codec helpers.

All integers are little-endian and fixed width; variable fields carry a
length prefix.  Every top-level serialized value starts with a one-byte
protocol version.
"""
from __future__ import annotations

import struct

from .errors import MalformedSerialization

VERSION = 1


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<B", v))
        return self

    def u16(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<H", v))
        return self

    def u32(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<I", v))
        return self

    def u64(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<Q", v))
        return self

    def f64(self, v: float) -> "Writer":
        self._parts.append(struct.pack("<d", v))
        return self

    def raw(self, b: bytes) -> "Writer":
        self._parts.append(bytes(b))
        return self

    def short_bytes(self, b: bytes) -> "Writer":
        if len(b) > 0xFFFF:
            raise ValueError("field too long for u16 prefix")
        return self.u16(len(b)).raw(b)

    def blob(self, b: bytes) -> "Writer":
        return self.u32(len(b)).raw(b)

    def text(self, s: str) -> "Writer":
        return self.short_bytes(s.encode("utf-8"))

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes, offset: int = 0) -> None:
        self.data = memoryview(data)
        self.offset = offset

    def _take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if end > len(self.data):
            raise MalformedSerialization(f"truncated {what}: need {n} bytes", self.offset)
        out = bytes(self.data[self.offset:end])
        self.offset = end
        return out

    def u8(self, what: str = "u8") -> int:
        return self._take(1, what)[0]

    def u16(self, what: str = "u16") -> int:
        return struct.unpack("<H", self._take(2, what))[0]

    def u32(self, what: str = "u32") -> int:
        return struct.unpack("<I", self._take(4, what))[0]

    def u64(self, what: str = "u64") -> int:
        return struct.unpack("<Q", self._take(8, what))[0]

    def f64(self, what: str = "f64") -> float:
        return struct.unpack("<d", self._take(8, what))[0]

    def raw(self, n: int, what: str = "bytes") -> bytes:
        return self._take(n, what)

    def short_bytes(self, what: str = "field") -> bytes:
        n = self.u16(what + " length")
        return self._take(n, what)

    def blob(self, what: str = "blob") -> bytes:
        n = self.u32(what + " length")
        return self._take(n, what)

    def text(self, what: str = "text") -> str:
        start = self.offset
        b = self.short_bytes(what)
        try:
            return b.decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedSerialization(f"{what} is not utf-8", start) from None

    def version(self) -> None:
        start = self.offset
        v = self.u8("version")
        if v != VERSION:
            raise MalformedSerialization(f"unsupported version {v}", start)

    def remaining(self) -> int:
        return len(self.data) - self.offset

    def done(self) -> None:
        if self.offset != len(self.data):
            raise MalformedSerialization("trailing bytes", self.offset)


def versioned() -> Writer:
    return Writer().u8(VERSION)
