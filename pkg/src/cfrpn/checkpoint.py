"""Versioned binary checkpoints; round trips are bitwise exact.

Layout (all integers little-endian):

    magic "CFRP" | u32 version | parameter table |
    u8 has_optimizer | [ u64 step | moment table m | moment table v ]

A table is a u32 entry count followed by entries of

    u16 name length | name utf-8 | u8 flags (bit0: decay exempt) |
    u8 dtype tag (1 f32, 2 f64, 3 i64) | u8 ndim | u32 dims... | raw data

Raw data is the array's C-order bytes.  Loading verifies magic, version,
and that the byte stream ends exactly where the tables say it should.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .optim import AdamState
from .tape import Parameter

MAGIC = b"CFRP"
VERSION = 1

_TAG_FOR = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}
_DTYPE_FOR = {1: "<f4", 2: "<f8", 3: "<i8"}


class CheckpointError(ValueError):
    pass


def _pack_entry(name: str, arr: np.ndarray, flags: int = 0) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _TAG_FOR:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    raw = name.encode("utf-8")
    head = struct.pack(f"<H{len(raw)}sBBB", len(raw), raw, flags,
                       _TAG_FOR[arr.dtype], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + dims + arr.astype(arr.dtype.newbyteorder("<")).tobytes()


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise CheckpointError(
                f"{self.path}: truncated, wanted {n} bytes at offset {self.off},"
                f" file has {len(self.data)}"
            )
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def entry(self) -> tuple[str, np.ndarray, int]:
        (name_len,) = self.unpack("<H")
        name = self.take(name_len).decode("utf-8")
        flags, tag, ndim = self.unpack("<BBB")
        if tag not in _DTYPE_FOR:
            raise CheckpointError(f"{self.path}: unknown dtype tag {tag} for {name!r}")
        shape = self.unpack(f"<{ndim}I")
        dtype = np.dtype(_DTYPE_FOR[tag])
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype)
        return name, arr.reshape(shape).copy(), flags

    def table(self) -> list[tuple[str, np.ndarray, int]]:
        (count,) = self.unpack("<I")
        return [self.entry() for _ in range(count)]


def save_checkpoint(path, params: list[Parameter], adam: AdamState | None = None) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(params))]
    chunks += [_pack_entry(p.name, p.value, int(p.decay_exempt)) for p in params]
    if adam is None:
        chunks.append(struct.pack("<B", 0))
    else:
        chunks.append(struct.pack("<BQ", 1, adam.t))
        for table in (adam.m, adam.v):
            chunks.append(struct.pack("<I", len(table)))
            chunks += [_pack_entry(name, arr) for name, arr in table.items()]
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[list[Parameter], AdamState | None]:
    r = _Reader(Path(path).read_bytes(), path)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}, expected {VERSION}")
    params = [Parameter(name, arr, bool(flags & 1)) for name, arr, flags in r.table()]
    (has_opt,) = r.unpack("<B")
    adam = None
    if has_opt:
        (step,) = r.unpack("<Q")
        m = {name: arr for name, arr, _ in r.table()}
        v = {name: arr for name, arr, _ in r.table()}
        adam = AdamState.from_tables(m, v, step)
    if r.off != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.off} trailing bytes")
    return params, adam


def apply_parameters(target: list[Parameter], loaded: list[Parameter]) -> None:
    """Copy loaded values into a model's parameters, matched by name."""
    table = {p.name: p for p in loaded}
    missing = [p.name for p in target if p.name not in table]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {missing}")
    for p in target:
        src = table[p.name]
        if src.value.shape != p.value.shape:
            raise CheckpointError(
                f"{p.name}: checkpoint shape {src.value.shape} != model {p.value.shape}"
            )
        p.value[...] = src.value.astype(p.value.dtype, copy=False)
