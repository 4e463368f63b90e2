"""Binary checkpoint container.

Layout (little-endian): ``b"COAMD1\\0"``, u32 entry count, then per entry
u32 name length, UTF-8 name, u32 rank, ``rank`` u32 dims, raw float32 data.
Metadata travels as zero-element entries whose name is ``key=value``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"COAMD1\0"


class CheckpointError(ValueError):
    pass


def to_bytes(tensors: dict, meta: dict | None = None) -> bytes:
    entries = []
    for k, v in (meta or {}).items():
        if "=" in k:
            raise CheckpointError(f"metadata key may not contain '=': {k!r}")
        entries.append((f"{k}={v}", np.zeros((0,), np.float32)))
    for name, arr in tensors.items():
        if "=" in name:
            raise CheckpointError(f"tensor name may not contain '=': {name!r}")
        entries.append((name, np.asarray(arr, dtype="<f4")))
    parts = [MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> tuple[dict, dict]:
    if not buf.startswith(MAGIC):
        raise CheckpointError("not a COAMD1 checkpoint (bad magic)")
    off = len(MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        chunk = buf[off:off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors, meta = {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        if "=" in name and n == 0:
            k, v = name.split("=", 1)
            meta[k] = v
        else:
            tensors[name] = arr
    if off != len(buf):
        raise CheckpointError("trailing bytes after last entry")
    return tensors, meta


def save(path, tensors: dict, meta: dict | None = None):
    Path(path).write_bytes(to_bytes(tensors, meta))


def load(path, expect_module: str | None = None) -> tuple[dict, dict]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing checkpoint: {p}")
    tensors, meta = from_bytes(p.read_bytes())
    if expect_module is not None and meta.get("module") != expect_module:
        raise CheckpointError(
            f"incompatible checkpoint {p}: module={meta.get('module')!r}, expected {expect_module!r}")
    return tensors, meta
