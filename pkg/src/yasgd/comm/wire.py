"""Bit-exact framing of inter-worker messages.

Layout (little-endian, 30-byte header followed by the payload)::

    magic      4s   b"YASG"
    version    u8   1
    iteration  u64
    group      u32
    chunk      u32
    dtype      u8   0 = float32, 1 = float16
    count      u64  number of elements
    payload    count * width bytes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

MAGIC = b"YASG"
VERSION = 1
HEADER = struct.Struct("<4sBQIIBQ")


class DType(IntEnum):
    F32 = 0
    F16 = 1

    @property
    def numpy(self) -> np.dtype:
        return np.dtype("<f4") if self is DType.F32 else np.dtype("<f2")

    @property
    def width(self) -> int:
        return 4 if self is DType.F32 else 2


class WireFormatError(ValueError):
    pass


@dataclass(frozen=True)
class WireMessage:
    iteration: int
    group: int
    chunk: int
    dtype: DType
    payload: bytes

    def __post_init__(self):
        if len(self.payload) % self.dtype.width:
            raise WireFormatError("payload length is not a multiple of the element width")

    @property
    def count(self) -> int:
        return len(self.payload) // self.dtype.width

    @classmethod
    def from_array(cls, values: np.ndarray, iteration: int = 0, group: int = 0, chunk: int = 0) -> "WireMessage":
        values = np.asarray(values)
        if values.dtype == np.float32:
            dtype = DType.F32
        elif values.dtype == np.float16:
            dtype = DType.F16
        else:
            raise WireFormatError(f"unsupported payload dtype {values.dtype}")
        data = np.ascontiguousarray(values, dtype=dtype.numpy).tobytes()
        return cls(iteration, group, chunk, dtype, data)

    def array(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype=self.dtype.numpy).astype(self.dtype.numpy.newbyteorder("="))

    def encode(self) -> bytes:
        header = HEADER.pack(MAGIC, VERSION, self.iteration, self.group, self.chunk, int(self.dtype), self.count)
        return header + self.payload

    @classmethod
    def decode(cls, data: bytes) -> "WireMessage":
        iteration, group, chunk, dtype, count = decode_header(data[:HEADER.size])
        payload = bytes(data[HEADER.size:])
        if len(payload) != count * dtype.width:
            raise WireFormatError(f"payload is {len(payload)} bytes, header promises {count * dtype.width}")
        return cls(iteration, group, chunk, dtype, payload)


def decode_header(header: bytes) -> tuple[int, int, int, DType, int]:
    if len(header) != HEADER.size:
        raise WireFormatError(f"header must be {HEADER.size} bytes, got {len(header)}")
    magic, version, iteration, group, chunk, dtype, count = HEADER.unpack(header)
    if magic != MAGIC:
        raise WireFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WireFormatError(f"unsupported wire version {version}")
    try:
        dtype = DType(dtype)
    except ValueError:
        raise WireFormatError(f"unknown dtype code {dtype}") from None
    return iteration, group, chunk, dtype, count


def payload_size(header: bytes) -> int:
    *_, dtype, count = decode_header(header)
    return count * dtype.width
