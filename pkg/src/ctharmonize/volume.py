"""Volume data model, the LTDV binary format, HU windows and ROI masks.

Voxel arrays are held as ``(nz, ny, nx)`` float32 numpy arrays, so the
flattened C-order buffer is x-fastest, matching the on-disk payload.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"LTDV"
VERSION = 1
_HEADER = struct.Struct("<4sH3I3f")


class VolumeFormatError(ValueError):
    """Base class for LTDV read/write failures."""


class BadMagicError(VolumeFormatError):
    pass


class VersionMismatchError(VolumeFormatError):
    pass


class PayloadLengthError(VolumeFormatError):
    pass


class NonFiniteVoxelError(VolumeFormatError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D grid of HU values with voxel spacing in millimetres."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteVoxelError("volume contains non-finite voxels")
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing_mm}")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing_mm", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        """(nx, ny, nz)."""
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Volume":
        """Same geometry, new voxels."""
        if np.shape(data) != self.data.shape:
            raise ValueError(f"shape {np.shape(data)} does not match volume {self.data.shape}")
        return Volume(data, self.spacing_mm)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.spacing_mm == other.spacing_mm and np.array_equal(self.data, other.data)

    @classmethod
    def filled(cls, dims: Sequence[int], value: float, spacing_mm=(1.0, 1.0, 1.0)) -> "Volume":
        nx, ny, nz = dims
        return cls(np.full((nz, ny, nx), value, dtype=np.float32), spacing_mm)


@dataclass(frozen=True)
class HURange:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"HU range needs lo < hi, got [{self.lo}, {self.hi}]")


# windows used for ROI-level evaluation
PAPER_WINDOWS = (
    HURange(-800, -300),
    HURange(-100, 250),
    HURange(10, 250),
    HURange(300, 800),
)


@dataclass(frozen=True, eq=False)
class ROIMask:
    mask: np.ndarray

    def __post_init__(self):
        m = np.array(self.mask, dtype=bool, copy=True)
        if m.ndim != 3:
            raise ValueError("ROI mask must be 3D")
        object.__setattr__(self, "mask", _frozen(m))

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.mask.shape
        return nx, ny, nz

    @property
    def voxel_count(self) -> int:
        return int(np.count_nonzero(self.mask))

    def __eq__(self, other):
        if not isinstance(other, ROIMask):
            return NotImplemented
        return np.array_equal(self.mask, other.mask)

    def __and__(self, other: "ROIMask") -> "ROIMask":
        return ROIMask(self.mask & other.mask)


def save_volume(v: Volume, path) -> None:
    if not np.all(np.isfinite(v.data)):
        raise NonFiniteVoxelError(f"refusing to save non-finite voxels to {path}")
    nx, ny, nz = v.dims
    header = _HEADER.pack(MAGIC, VERSION, nx, ny, nz, *v.spacing_mm)
    payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        if raw[:4] != MAGIC[: len(raw[:4])]:
            raise BadMagicError(f"{path}: not an LTDV file")
        raise PayloadLengthError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    if min(nx, ny, nz) < 1:
        raise VolumeFormatError(f"{path}: zero dimension in header {(nx, ny, nz)}")
    n_bytes = len(raw) - _HEADER.size
    expected = nx * ny * nz
    if n_bytes != 4 * expected:
        raise PayloadLengthError(
            f"{path}: payload holds {n_bytes / 4:g} values, header declares {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(nz, ny, nx)
    if not np.all(np.isfinite(data)):
        raise NonFiniteVoxelError(f"{path}: payload contains non-finite voxels")
    if not (np.isfinite([sx, sy, sz]).all() and min(sx, sy, sz) > 0):
        raise VolumeFormatError(f"{path}: invalid spacing {(sx, sy, sz)}")
    return Volume(data.astype(np.float32), (sx, sy, sz))


def roi_from_window(v: Volume, w: HURange) -> ROIMask:
    """Voxels with lo <= value <= hi."""
    return ROIMask((v.data >= w.lo) & (v.data <= w.hi))


def roi_from_sphere(v: Volume, center: Sequence[float], radius_vox: float) -> ROIMask:
    """Voxels whose centres lie within ``radius_vox`` of ``center`` (given as x, y, z)."""
    nx, ny, nz = v.dims
    cx, cy, cz = (float(c) for c in center)
    if not (0 <= cx <= nx - 1 and 0 <= cy <= ny - 1 and 0 <= cz <= nz - 1):
        raise ValueError(f"sphere center {tuple(center)} outside volume dims {(nx, ny, nz)}")
    if radius_vox < 0:
        raise ValueError("radius must be non-negative")
    z, y, x = np.ogrid[:nz, :ny, :nx]
    d2 = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2
    return ROIMask(d2 <= float(radius_vox) ** 2)
