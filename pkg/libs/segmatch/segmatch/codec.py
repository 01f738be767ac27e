"""Little-endian binary record helpers shared by the model, map and cloud formats."""
import struct
from typing import Tuple, Type

import numpy as np

from .exceptions import SegMatchError


class BinaryWriter:
    def __init__(self):
        self._chunks = []

    def pack(self, fmt: str, *values) -> "BinaryWriter":
        self._chunks.append(struct.pack("<" + fmt, *values))
        return self

    def raw(self, payload: bytes) -> "BinaryWriter":
        self._chunks.append(payload)
        return self

    def array(self, values: np.ndarray, dtype: str = "<f8") -> "BinaryWriter":
        self._chunks.append(np.ascontiguousarray(values, dtype=dtype).tobytes())
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._chunks)


class BinaryReader:
    """Sequential reader that raises error_cls on truncation."""

    def __init__(self, payload: bytes, error_cls: Type[SegMatchError], source: str = "<bytes>"):
        self._payload = payload
        self._offset = 0
        self._error_cls = error_cls
        self._source = source

    @property
    def remaining(self) -> int:
        return len(self._payload) - self._offset

    def _need(self, size: int, what: str) -> None:
        if size > self.remaining:
            raise self._error_cls(
                f"{self._source}: truncated while reading {what} "
                f"(need {size} bytes at offset {self._offset}, {self.remaining} left)"
            )

    def raw(self, size: int, what: str = "bytes") -> bytes:
        self._need(size, what)
        chunk = self._payload[self._offset:self._offset + size]
        self._offset += size
        return chunk

    def unpack(self, fmt: str, what: str = "field") -> Tuple:
        size = struct.calcsize("<" + fmt)
        return struct.unpack("<" + fmt, self.raw(size, what))

    def array(self, count: int, dtype: str = "<f8", what: str = "array") -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.raw(count * itemsize, what), dtype=dtype).astype(np.dtype(dtype).newbyteorder("="))

    def expect_end(self) -> None:
        if self.remaining:
            raise self._error_cls(f"{self._source}: {self.remaining} unexpected trailing bytes")
