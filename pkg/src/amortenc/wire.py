"""Shared little-endian binary primitives for checkpoint and store files.

Every on-disk artifact (model checkpoints, head checkpoints, feature
records) is built from the same few elements: a 4-byte magic, a u16
version, u16-length-prefixed UTF-8 strings, and tensors serialized as
``rank u8 | dims u32*rank | payload``.  Readers track a byte offset and
raise :class:`FormatError` pointing at the exact failure position.
"""

import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError


class Reader:
    """Offset-tracking wrapper over a binary stream."""

    def __init__(self, stream: BinaryIO):
        self._stream = stream
        self.offset = 0

    def read_exact(self, n: int, what: str) -> bytes:
        data = self._stream.read(n)
        if len(data) != n:
            raise FormatError(
                f"truncated {what}: expected {n} bytes, got {len(data)}",
                offset=self.offset,
            )
        self.offset += n
        return data

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.read_exact(size, what))

    def u8(self, what: str) -> int:
        return self.unpack("<B", what)[0]

    def u16(self, what: str) -> int:
        return self.unpack("<H", what)[0]

    def u32(self, what: str) -> int:
        return self.unpack("<I", what)[0]

    def u64(self, what: str) -> int:
        return self.unpack("<Q", what)[0]

    def f32(self, what: str) -> float:
        return self.unpack("<f", what)[0]

    def str16(self, what: str) -> str:
        n = self.u16(f"{what} length")
        raw = self.read_exact(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 in {what}: {exc}",
                              offset=self.offset - n)

    def magic(self, expected: bytes):
        got = self.read_exact(len(expected), "magic")
        if got != expected:
            raise FormatError(
                f"bad magic: expected {expected!r}, got {got!r}", offset=0)

    def version(self, expected: int):
        got = self.u16("version")
        if got != expected:
            raise FormatError(
                f"unsupported version {got} (expected {expected})",
                offset=self.offset - 2)

    def tensor(self, what: str, dtype=np.float32) -> np.ndarray:
        rank = self.u8(f"{what} rank")
        dims = self.unpack(f"<{rank}I", f"{what} dims") if rank else ()
        count = 1
        for dim in dims:
            count *= dim
        itemsize = np.dtype(dtype).itemsize
        raw = self.read_exact(count * itemsize, f"{what} payload")
        arr = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<"))
        return arr.astype(dtype, copy=True).reshape(dims)


def write_u8(stream: BinaryIO, value: int):
    stream.write(struct.pack("<B", value))


def write_u16(stream: BinaryIO, value: int):
    stream.write(struct.pack("<H", value))


def write_u32(stream: BinaryIO, value: int):
    stream.write(struct.pack("<I", value))


def write_u64(stream: BinaryIO, value: int):
    stream.write(struct.pack("<Q", value))


def write_f32(stream: BinaryIO, value: float):
    stream.write(struct.pack("<f", value))


def write_str16(stream: BinaryIO, text: str):
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"string too long for u16 length prefix: {len(raw)}")
    write_u16(stream, len(raw))
    stream.write(raw)


def write_tensor(stream: BinaryIO, arr: np.ndarray, dtype=np.float32):
    arr = np.ascontiguousarray(arr, dtype=dtype)
    write_u8(stream, arr.ndim)
    for dim in arr.shape:
        write_u32(stream, dim)
    stream.write(arr.astype(np.dtype(dtype).newbyteorder("<")).tobytes())
