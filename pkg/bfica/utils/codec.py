"""
Canonical byte encoding used for every hash and signature.

Fields are written in declaration order. Variable-length values carry a
big-endian u32 length prefix, integers are big-endian, floats are IEEE-754
doubles and text is UTF-8. Sequences are a u32 count followed by items.
"""
import struct
from typing import Callable, Iterable, List, Optional, TypeVar

from bfica.errors import DecodeError

T = TypeVar("T")

_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_I64 = struct.Struct(">q")
_F64 = struct.Struct(">d")


class Encoder:
    def __init__(self) -> None:
        self._parts: List[bytes] = []

    def raw(self, data: bytes) -> "Encoder":
        self._parts.append(_U32.pack(len(data)))
        self._parts.append(bytes(data))
        return self

    def text(self, value: str) -> "Encoder":
        return self.raw(value.encode("utf-8"))

    def u32(self, value: int) -> "Encoder":
        self._parts.append(_U32.pack(value))
        return self

    def u64(self, value: int) -> "Encoder":
        self._parts.append(_U64.pack(value))
        return self

    def i64(self, value: int) -> "Encoder":
        self._parts.append(_I64.pack(value))
        return self

    def f64(self, value: float) -> "Encoder":
        self._parts.append(_F64.pack(float(value)))
        return self

    def flag(self, value: bool) -> "Encoder":
        self._parts.append(b"\x01" if value else b"\x00")
        return self

    def optional(self, data: Optional[bytes]) -> "Encoder":
        self.flag(data is not None)
        if data is not None:
            self.raw(data)
        return self

    def seq(self, items: Iterable[T], write: Callable[["Encoder", T], object]) -> "Encoder":
        items = list(items)
        self.u32(len(items))
        for item in items:
            write(self, item)
        return self

    def to_bytes(self) -> bytes:
        return b"".join(self._parts)


class Decoder:
    def __init__(self, data: bytes) -> None:
        self._buf = bytes(data)
        self._pos = 0

    def _take(self, n: int) -> bytes:
        end = self._pos + n
        if n < 0 or end > len(self._buf):
            raise DecodeError(f"truncated input at offset {self._pos}")
        out = self._buf[self._pos:end]
        self._pos = end
        return out

    def raw(self) -> bytes:
        (n,) = _U32.unpack(self._take(4))
        return self._take(n)

    def text(self) -> str:
        try:
            return self.raw().decode("utf-8")
        except UnicodeDecodeError as e:
            raise DecodeError(f"invalid UTF-8 text: {e}")

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def i64(self) -> int:
        return _I64.unpack(self._take(8))[0]

    def f64(self) -> float:
        return _F64.unpack(self._take(8))[0]

    def flag(self) -> bool:
        b = self._take(1)
        if b not in (b"\x00", b"\x01"):
            raise DecodeError("invalid flag byte")
        return b == b"\x01"

    def optional(self) -> Optional[bytes]:
        return self.raw() if self.flag() else None

    def seq(self, read: Callable[["Decoder"], T]) -> List[T]:
        count = self.u32()
        if count > len(self._buf) - self._pos:
            raise DecodeError("sequence count exceeds remaining input")
        return [read(self) for _ in range(count)]

    def finish(self) -> None:
        if self._pos != len(self._buf):
            raise DecodeError(f"{len(self._buf) - self._pos} trailing bytes")
