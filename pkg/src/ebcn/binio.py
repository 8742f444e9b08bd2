"""Low-level binary helpers shared by the cache and checkpoint formats.

All multi-byte integers in both formats are little-endian, regardless of
platform, so files are byte-identical across machines.
"""

from __future__ import annotations

import struct

from .errors import DataError

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_U64_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, value: int = FNV64_OFFSET) -> int:
    """64-bit FNV-1a over ``data``; pass ``value`` to continue a running hash."""
    for byte in data:
        value = ((value ^ byte) * FNV64_PRIME) & _U64_MASK
    return value


class ByteReader:
    """Sequential reader that reports the byte offset of any truncation."""

    def __init__(self, data: bytes, context: str):
        self._data = data
        self._context = context
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if end > len(self._data):
            raise DataError(
                f"{self._context}: truncated file at byte offset {len(self._data)}"
                f" (needed {n} bytes for {what} at offset {self.offset})"
            )
        chunk = self._data[self.offset : end]
        self.offset = end
        return chunk

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def remaining(self) -> int:
        return len(self._data) - self.offset


def pack_u8(v: int) -> bytes:
    return struct.pack("<B", v)


def pack_u16(v: int) -> bytes:
    return struct.pack("<H", v)


def pack_u32(v: int) -> bytes:
    return struct.pack("<I", v)


def pack_u64(v: int) -> bytes:
    return struct.pack("<Q", v)
