"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"FSKD"  u16 version  32-byte sha256 config hash  u32 tensor count
    per tensor: u32 name length, utf-8 name, u32 rank, u32 dims..., float32 payload

Tensors are written in sorted-name order, so save -> load -> save is
byte-identical.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FSKD"
VERSION = 1
HASH_LEN = 32


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray], config_hash: bytes) -> bytes:
    if len(config_hash) != HASH_LEN:
        raise CheckpointError(f"config hash must be {HASH_LEN} bytes")
    out = [MAGIC, struct.pack("<H", VERSION), config_hash, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode()
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def loads(blob: bytes, expected_hash: bytes | None = None) -> tuple[bytes, dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an FSKD checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 6
    config_hash = blob[pos:pos + HASH_LEN]
    pos += HASH_LEN
    if expected_hash is not None and config_hash != expected_hash:
        raise CheckpointError("checkpoint config hash does not match the current config; refusing to load")
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 4 * size
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after tensor table")
    return config_hash, tensors


def save(path: str | Path, tensors: Mapping[str, np.ndarray], config_hash: bytes) -> None:
    Path(path).write_bytes(dumps(tensors, config_hash))


def load(path: str | Path, expected_hash: bytes | None = None) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes(), expected_hash)[1]


def to_float32_precision(tensors: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Values as they come back from a checkpoint."""
    return {k: np.asarray(v, dtype=np.float32).astype(np.float64) for k, v in tensors.items()}
