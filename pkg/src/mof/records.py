"""Binary tensor-record containers shared by model checkpoints and frame memory.

Record layout (all integers little-endian)::

    u32 name_len | name (utf-8) | u32 rank | rank * u32 extents | u8 precision | values

precision tag 0 = f32, 1 = f64; values are little-endian in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

CKPT_MAGIC = b"MOFCKPT1"
MEMORY_MAGIC = b"MOFMEM01"

_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


class Reader:
    """Cursor over a byte buffer that reports offsets in its errors."""

    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def fail(self, msg: str, offset: int | None = None):
        raise FormatError(f"{self.source}: {msg} at offset {self.pos if offset is None else offset}")

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            self.fail(f"truncated file: needed {n} bytes, {len(self.data) - self.pos} left")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def string(self, width: str = "I") -> str:
        n = self.unpack(width)
        raw = self.take(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            self.fail("invalid utf-8 in name", self.pos - n)

    def magic(self, expected: bytes) -> None:
        if len(self.data) == 0:
            self.fail("empty file", 0)
        got = self.take(len(expected))
        for i, (a, b) in enumerate(zip(got, expected)):
            if a != b:
                self.fail(f"bad magic {got!r}, expected {expected!r}", i)

    def array(self, shape, dtype) -> np.ndarray:
        dtype = np.dtype(dtype)
        n = int(np.prod(shape, dtype=np.int64)) if len(shape) else 1
        raw = self.take(n * dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    def at_end(self) -> bool:
        return self.pos == len(self.data)


def write_record(out: BinaryIO, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in _TAGS:
        arr = arr.astype(np.float64)
    tag = _TAGS[arr.dtype]
    raw = name.encode("utf-8")
    out.write(struct.pack("<I", len(raw)))
    out.write(raw)
    out.write(struct.pack("<I", arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(struct.pack("<B", tag))
    out.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())


def read_record(r: Reader) -> tuple[str, np.ndarray]:
    name = r.string()
    rank = r.unpack("I")
    if rank > 8:
        r.fail(f"implausible rank {rank}", r.pos - 4)
    shape = tuple(r.unpack(f"{rank}I")) if rank > 1 else ((r.unpack("I"),) if rank == 1 else ())
    tag = r.unpack("B")
    if tag not in _DTYPES:
        r.fail(f"unknown precision tag {tag}", r.pos - 1)
    arr = r.array(shape, _DTYPES[tag])
    return name, arr.astype(arr.dtype.newbyteorder("="))


def write_records(out: BinaryIO, records: dict[str, np.ndarray]) -> None:
    out.write(struct.pack("<I", len(records)))
    for name, arr in records.items():
        write_record(out, name, arr)


def read_records(r: Reader) -> dict[str, np.ndarray]:
    n = r.unpack("I")
    out: dict[str, np.ndarray] = {}
    for _ in range(n):
        name, arr = read_record(r)
        out[name] = arr
    return out


def save_container(path: str | Path, magic: bytes, records: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(magic)
        write_records(fh, records)


def load_container(path: str | Path, magic: bytes) -> dict[str, np.ndarray]:
    path = Path(path)
    r = Reader(path.read_bytes(), str(path))
    r.magic(magic)
    recs = read_records(r)
    if not r.at_end():
        r.fail("trailing bytes after last record")
    return recs
