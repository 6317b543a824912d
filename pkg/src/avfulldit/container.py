"""Binary container for checkpoints and datasets.

Layout (all integers unsigned 64-bit little-endian)::

    b"AVFD1"
    header_len, header bytes        canonical key-sorted ``key = value`` text
    repeated blob:
        name_len, name bytes, rank, dims[rank], float64 payload (little-endian)
    FNV-1a 64-bit checksum of every preceding byte
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import canonical

MAGIC = b"AVFD1"
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


class CheckpointError(ValueError):
    pass


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


def encode(header: dict[str, object], blobs: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    head = canonical.emit(header).encode("utf-8")
    parts += [struct.pack("<Q", len(head)), head]
    for name in sorted(blobs):
        arr = np.asarray(blobs[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts += [struct.pack("<Q", len(raw)), raw, struct.pack("<Q", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def decode(data: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    if not data.startswith(MAGIC):
        found = data[: len(MAGIC)]
        raise CheckpointError(f"unsupported format/version: expected magic {MAGIC!r}, found {found!r}")
    if len(data) < len(MAGIC) + 16:
        raise CheckpointError("file truncated")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if fnv1a64(body) != stored:
        raise CheckpointError("checksum mismatch: file is corrupted or truncated")

    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("file truncated inside a record")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    (head_len,) = struct.unpack("<Q", take(8))
    header = canonical.parse(take(head_len).decode("utf-8"))
    blobs: dict[str, np.ndarray] = {}
    while pos < len(body):
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        blobs[name] = arr
    return header, blobs


def write(path, header: dict[str, object], blobs: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(header, blobs))


def read(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
