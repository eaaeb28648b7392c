"""Little-endian helpers shared by the model and adapter checkpoint formats."""

from __future__ import annotations

import struct

import numpy as np


class CheckpointError(ValueError):
    pass


class Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def raw(self, b: bytes) -> None:
        self.parts.append(b)

    def u8(self, x: int) -> None:
        self.parts.append(struct.pack("<B", x))

    def u16(self, x: int) -> None:
        self.parts.append(struct.pack("<H", x))

    def u32(self, x: int) -> None:
        self.parts.append(struct.pack("<I", x))

    def f32(self, x: float) -> None:
        self.parts.append(struct.pack("<f", x))

    def text(self, s: str) -> None:
        b = s.encode("utf-8")
        self.u32(len(b))
        self.parts.append(b)

    def dims(self, shape) -> None:
        self.u32(len(shape))
        for d in shape:
            self.u32(d)

    def array(self, a: np.ndarray) -> None:
        self.parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated file")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self._take(4))[0]

    def text(self) -> str:
        return self._take(self.u32()).decode("utf-8")

    def dims(self) -> tuple[int, ...]:
        return tuple(self.u32() for _ in range(self.u32()))

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) if len(shape) else 1
        buf = self._take(4 * n)
        return np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape)

    def expect_end(self) -> None:
        if self.pos != len(self.data):
            raise CheckpointError(f"{len(self.data) - self.pos} trailing bytes")


def check_magic(r: Reader, magic: bytes, version: int) -> None:
    got = r.raw(len(magic)) if len(r.data) >= len(magic) else b""
    if got != magic:
        raise CheckpointError("bad magic")
    v = r.u16()
    if v != version:
        raise CheckpointError(f"unsupported version {v} (expected {version})")


def f32_round(a: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 value, keeping float64 storage."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)
