"""Volume data model and the HMV binary format.

HMV layout (little-endian): magic "HMV1" | u8 dtype code (0 = float32,
1 = uint8) | u8 rank | 6 zero bytes | rank x u32 dims | payload row-major,
last dimension fastest.  Channel order for 4-D biomarker files is fixed:
v_ep, v_lu, d_ep, d_st, t2_ep, t2_st.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHANNELS = ("v_ep", "v_lu", "d_ep", "d_st", "t2_ep", "t2_st")

MAGIC = b"HMV1"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_DTYPE_NAMES = {"f32": 0, "u8": 1}
_MAX_DIM = (1 << 32) - 1


class VolumeError(Exception):
    """Base class for HMV format violations."""


class VolumeMagicError(VolumeError):
    """File does not start with the HMV1 magic."""


class VolumeTruncatedError(VolumeError):
    """Header-declared payload size does not match the file contents."""


class VolumeDimError(VolumeError):
    """A dimension falls outside the unsigned 32-bit field or is implausible."""


def write_volume(path, grid: np.ndarray, dtype: str = "f32") -> None:
    if dtype not in _DTYPE_NAMES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPE_NAMES)}, got {dtype!r}")
    code = _DTYPE_NAMES[dtype]
    arr = np.ascontiguousarray(grid, dtype=_DTYPE_CODES[code])
    for dim in arr.shape:
        if dim > _MAX_DIM:
            raise VolumeDimError(f"dimension {dim} exceeds u32 range")
    if arr.ndim > 255:
        raise VolumeDimError(f"rank {arr.ndim} does not fit in one byte")
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + b"\x00" * 6
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    Path(path).write_bytes(header + dims + arr.tobytes())


def read_volume(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise VolumeMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 12:
        raise VolumeTruncatedError(f"header needs 12 bytes, file has {len(blob)}")
    code, rank = struct.unpack("<BB", blob[4:6])
    if code not in _DTYPE_CODES:
        raise VolumeError(f"unknown dtype code {code}")
    pos = 12
    if len(blob) < pos + 4 * rank:
        raise VolumeTruncatedError("file ends inside the dimension list")
    shape = struct.unpack(f"<{rank}I", blob[pos : pos + 4 * rank]) if rank else ()
    pos += 4 * rank
    total = 1
    for dim in shape:
        total *= dim
    if total > 1 << 40:
        raise VolumeDimError(f"declared element count {total} is implausible")
    expected = total * _DTYPE_CODES[code].itemsize
    if len(blob) - pos != expected:
        raise VolumeTruncatedError(
            f"payload is {len(blob) - pos} bytes, header declares {expected}"
        )
    arr = np.frombuffer(blob, dtype=_DTYPE_CODES[code], offset=pos).reshape(shape)
    return np.array(arr)  # own the memory, writable


def dilate_mask(mask, radius: int = 2) -> "MaskVolume":
    """Chebyshev dilation: every voxel within L-inf distance `radius` of a
    set voxel joins the mask (clipped at the volume borders)."""
    if radius < 0:
        raise ValueError(f"dilation radius must be nonnegative, got {radius}")
    values = mask.values if isinstance(mask, MaskVolume) else np.asarray(mask)
    if radius == 0:
        return MaskVolume((values > 0).astype(np.uint8))
    from scipy.ndimage import binary_dilation

    footprint = np.ones((2 * radius + 1,) * 3, dtype=bool)
    return MaskVolume(binary_dilation(values > 0, structure=footprint).astype(np.uint8))


# -- biomarker volume --------------------------------------------------


def clamp_physical(data: np.ndarray) -> np.ndarray:
    """Clamp a (6, Z, H, W) array to each channel's physical range, in place.

    Volume fractions go to [0, 1] with their sum capped at 1 (proportional
    rescale of the pair); diffusivities and relaxation times are floored at
    a small positive value rather than their typical tissue range, so a
    corrupted voxel stays visibly corrupted instead of being masked.
    """
    np.clip(data[0], 0.0, 1.0, out=data[0])
    np.clip(data[1], 0.0, 1.0, out=data[1])
    s = data[0] + data[1]
    over = s > 1.0
    if np.any(over):
        data[0][over] = data[0][over] / s[over]
        data[1][over] = data[1][over] / s[over]
        data[1][over] = np.minimum(data[1][over], np.maximum(1.0 - data[0][over], 0.0))
    np.maximum(data[2:], 1e-6, out=data[2:])
    return data


@dataclass
class BiomarkerVolume:
    """Six-channel biomarker stack, stored (6, Z, H, W) float32."""

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[0] != len(CHANNELS):
            raise ValueError(
                f"biomarker volume must be ({len(CHANNELS)}, Z, H, W), got {self.data.shape}"
            )
        z = self.data.shape[1]
        if not 4 <= z <= 64:
            raise ValueError(f"slice count {z} outside [4, 64]")

    @property
    def dims(self) -> tuple:
        return self.data.shape[1:]

    def channel(self, name: str) -> np.ndarray:
        return self.data[CHANNELS.index(name)]

    def validate(self) -> None:
        """Raise if any physical-range invariant is violated."""
        if not np.all(np.isfinite(self.data)):
            raise ValueError("non-finite biomarker values")
        v = self.data[:2]
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("volume fractions outside [0, 1]")
        if np.max(self.data[0] + self.data[1]) > 1.0 + 1e-6:
            raise ValueError("v_ep + v_lu exceeds 1")
        if self.data[2:].min() <= 0.0:
            raise ValueError("diffusivity or relaxation values must be positive")


@dataclass
class MaskVolume:
    """Binary (Z, H, W) mask stored as uint8."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values)
        uniq = np.unique(arr)
        if not np.all(np.isin(uniq, (0, 1))):
            raise ValueError(f"mask must be binary, found values {uniq[:5]}")
        self.values = arr.astype(np.uint8)
        if self.values.ndim != 3:
            raise ValueError(f"mask must be (Z, H, W), got {self.values.shape}")

    @property
    def count(self) -> int:
        return int(self.values.sum())

    def is_subset_of(self, other: "MaskVolume") -> bool:
        return bool(np.all(other.values[self.values > 0] == 1))
