"""Checkpoint container: version magic, canonical config text, then a flat
name -> array table.

Layout (all integers little-endian u32, data little-endian f64):

    8 bytes   magic b"QFCHKPT1" (the trailing digit is the format version)
    u32       config text length, then that many utf-8 bytes
    u32       parameter count
    repeated, sorted by name:
        u32 name length, name bytes, u32 ndim, u32 dims..., raw f64 data

Sorted names and fixed-width fields make the file byte-deterministic for a
given parameter set.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"QFCHKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, store, config_text: str) -> None:
    blob = bytearray()
    blob += MAGIC
    cfg_bytes = config_text.encode("utf-8")
    blob += struct.pack("<I", len(cfg_bytes))
    blob += cfg_bytes
    names = sorted(store.names())
    blob += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(store[name], dtype="<f8")
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb))
        blob += nb
        blob += struct.pack("<I", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint {self.path}: "
                                  f"needed {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path):
    """Returns (config_text, {name: array})."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(data, path)
    magic = r.take(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(
            f"unsupported checkpoint version in {path}: expected {MAGIC.decode()}, "
            f"found {magic.decode('utf-8', errors='replace')!r}")
    config_text = r.take(r.u32()).decode("utf-8")
    count = r.u32()
    values: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        if ndim > 8:
            raise CheckpointError(f"corrupt checkpoint {path}: parameter {name!r} claims {ndim} dims")
        shape = tuple(r.u32() for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        raw = r.take(8 * size)
        values[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError(f"corrupt checkpoint {path}: {len(data) - r.pos} trailing bytes")
    return config_text, values
