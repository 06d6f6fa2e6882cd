"""Binary containers for weights/probabilities (PMW1) and hard masks (PMSK).

All integers are little-endian.

PMW1::

    b"PMW1" | u32 count | count x (u16 name_len | name utf-8 | u8 rank | rank x u32 dim | f64 data)

PMSK::

    b"PMSK" | u16 version | u32 count |
    count x (u16 name_len | name utf-8 | u8 rank | rank x u32 dim | packed bits)

Mask bits are row-major, most significant bit first, the last byte zero-padded.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

WEIGHTS_MAGIC = b"PMW1"
MASK_MAGIC = b"PMSK"
MASK_VERSION = 1


class FormatError(ValueError):
    pass


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def header(self) -> tuple[str, tuple[int, ...]]:
        (name_len,) = self.unpack("H")
        try:
            name = self.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.path}: bad tensor name") from exc
        (rank,) = self.unpack("B")
        dims = self.unpack(f"{rank}I") if rank else ()
        return name, tuple(dims)

    def finish(self) -> None:
        if self.pos != len(self.raw):
            raise FormatError(f"{self.path}: {len(self.raw) - self.pos} trailing bytes")


def _entry_header(name: str, shape) -> bytes:
    encoded = name.encode("utf-8")
    return (struct.pack("<H", len(encoded)) + encoded + struct.pack("<B", len(shape))
            + struct.pack(f"<{len(shape)}I", *shape))


def dump_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [WEIGHTS_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        parts.append(_entry_header(name, arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def load_tensors(raw: bytes, path="<bytes>") -> dict[str, np.ndarray]:
    r = _Reader(raw, path)
    if r.take(4) != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: not a PMW1 file")
    (count,) = r.unpack("I")
    out = {}
    for _ in range(count):
        name, shape = r.header()
        size = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    r.finish()
    return out


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dump_tensors(tensors))


def read_tensors(path) -> dict[str, np.ndarray]:
    return load_tensors(Path(path).read_bytes(), path)


def dump_mask(values: Mapping[str, np.ndarray]) -> bytes:
    parts = [MASK_MAGIC, struct.pack("<HI", MASK_VERSION, len(values))]
    for name, m in values.items():
        m = np.asarray(m)
        if not np.all((m == 0) | (m == 1)):
            raise ValueError(f"{name}: mask is not binary")
        parts.append(_entry_header(name, m.shape))
        parts.append(np.packbits(m.ravel().astype(np.uint8)).tobytes())
    return b"".join(parts)


def load_mask(raw: bytes, path="<bytes>") -> dict[str, np.ndarray]:
    r = _Reader(raw, path)
    if r.take(4) != MASK_MAGIC:
        raise FormatError(f"{path}: not a PMSK file")
    version, count = r.unpack("HI")
    if version != MASK_VERSION:
        raise FormatError(f"{path}: unsupported mask version {version}")
    out = {}
    for _ in range(count):
        name, shape = r.header()
        size = int(np.prod(shape)) if shape else 1
        packed = np.frombuffer(r.take((size + 7) // 8), dtype=np.uint8)
        bits = np.unpackbits(packed)
        if bits[size:].any():
            raise FormatError(f"{path}: nonzero padding bits in {name}")
        out[name] = bits[:size].astype(np.float64).reshape(shape)
    r.finish()
    return out


def write_mask(path, values: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dump_mask(values))


def read_mask(path) -> dict[str, np.ndarray]:
    return load_mask(Path(path).read_bytes(), path)
