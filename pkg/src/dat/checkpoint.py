"""DATCKPT1: a flat little-endian container of named float32 tensors.

Layout::

    b"DATCKPT1" | u32 count | count x (u16 name_len | name utf-8 | u8 rank |
                                       rank x u32 dims | float32 payload, row-major)
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DATCKPT1"
_MAX_ELEMENTS = 2 ** 31


class CheckpointError(ValueError):
    pass


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long ({len(raw)} bytes): {name[:40]}...")
        a = np.asarray(arr)
        if a.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} has rank {a.ndim} > 255")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:8] != MAGIC:
        raise CheckpointError(f"bad magic {bytes(buf[:8])!r} at byte offset 0: expected {MAGIC!r}")
    pos = 8

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated {what} at byte offset {pos}: need {n} bytes, "
                                  f"{len(buf) - pos} available")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "tensor count"))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = 1
        for d in dims:
            size *= d
        if size > _MAX_ELEMENTS:
            raise CheckpointError(f"dimension overflow for {name!r} at byte offset {pos}: dims {dims}")
        payload = take(4 * size, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, "<f4").reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise CheckpointError(f"trailing data at byte offset {pos}: {len(buf) - pos} unexpected bytes")
    return out


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(tensors))
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
