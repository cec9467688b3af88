"""Binary parameter-set serialization.

Layout: magic "HBRW", u32 LE tensor count; per tensor: u16 LE name length,
UTF-8 name, u8 rank, rank x u32 LE dims, float32 LE data, row-major.
Tensors are written in sorted name order so identical parameter sets always
produce identical bytes.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HBRW"
_MAX_DIM = (1 << 32) - 1


class CheckpointError(Exception):
    """Base class for checkpoint format violations."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the expected magic bytes."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the declared payload does."""


class CheckpointDimError(CheckpointError):
    """A dimension does not fit the unsigned 32-bit field."""


def checkpoint_bytes(arrays: dict) -> bytes:
    """Serialize name -> ndarray as float32, sorted by name."""
    chunks = [MAGIC, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype="<f4")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"tensor name too long ({len(encoded)} bytes)")
        if data.ndim > 0xFF:
            raise ValueError(f"rank {data.ndim} does not fit in one byte")
        for dim in data.shape:
            if dim > _MAX_DIM:
                raise CheckpointDimError(f"dimension {dim} of {name!r} exceeds u32 range")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", data.ndim))
        if data.ndim:
            chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    return b"".join(chunks)


def arrays_sha256(arrays: dict) -> str:
    """Hex digest of the serialized form of the given arrays."""
    return hashlib.sha256(checkpoint_bytes(arrays)).hexdigest()


def write_checkpoint(path, arrays: dict) -> None:
    Path(path).write_bytes(checkpoint_bytes(arrays))


def read_checkpoint(path) -> dict:
    """Parse a checkpoint back into name -> float32 ndarray."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(blob):
            raise CheckpointTruncatedError(
                f"need {nbytes} bytes at offset {pos}, file has {len(blob)}"
            )
        chunk = blob[pos : pos + nbytes]
        pos += nbytes
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        total = 1
        for dim in shape:
            total *= dim
        data = np.frombuffer(take(4 * total), dtype="<f4").reshape(shape)
        out[name] = np.array(data)  # own the memory, writable
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after declared tensors")
    return out


def checkpoint_sha256(path) -> str:
    """Hex digest of the checkpoint file bytes."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
