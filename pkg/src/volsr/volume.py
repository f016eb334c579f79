"""3D scalar volumes, the SRV1 file format and basic geometry helpers.

Arrays are indexed ``data[x, y, z]``. On disk the payload is x-fastest, which
is numpy Fortran order for that indexing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SRV1"
_HEADER = struct.Struct("<4s3I3f")


class VolumeFormatError(ValueError):
    """Base class for SRV1 parse failures."""


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class ZeroDimensionError(VolumeFormatError):
    pass


class OutOfBoundsError(ValueError):
    pass


class MeasurementFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class Volume3D:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacings must be three positive numbers, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def nx(self) -> int:
        return self.data.shape[0]

    @property
    def ny(self) -> int:
        return self.data.shape[1]

    @property
    def nz(self) -> int:
        return self.data.shape[2]

    def with_data(self, data: np.ndarray) -> "Volume3D":
        return Volume3D(data, self.spacing)


@dataclass(frozen=True)
class Roi3D:
    """Half-open voxel box ``[lo, hi)`` on each axis."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]
    name: str = field(default="", compare=False)

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lo)
        hi = tuple(int(v) for v in self.hi)
        if any(h <= l for l, h in zip(lo, hi)) or min(lo) < 0:
            raise ValueError(f"empty or negative ROI box {lo}..{hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def check_inside(self, shape) -> None:
        if any(h > n for h, n in zip(self.hi, shape)):
            raise ValueError(f"ROI {self.lo}..{self.hi} exceeds volume shape {tuple(shape)}")

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(l, h) for l, h in zip(self.lo, self.hi))

    def values(self, v: Volume3D) -> np.ndarray:
        self.check_inside(v.shape)
        return v.data[self.slices()]

    def overlaps(self, other: "Roi3D") -> bool:
        return all(max(a, c) < min(b, d) for a, b, c, d in zip(self.lo, self.hi, other.lo, other.hi))


def normalize(v: Volume3D) -> Volume3D:
    """Min-max rescale to [0, 1]. A constant volume maps to all zeros."""
    data = np.asarray(v.data, dtype=np.float64)
    lo = data.min()
    hi = data.max()
    if hi <= lo:
        return v.with_data(np.zeros_like(data))
    out = (data - lo) / (hi - lo)
    # guard against the last-ulp overshoot of the division
    np.clip(out, 0.0, 1.0, out=out)
    return v.with_data(out)


def _center_slices(n_in: int, n_out: int) -> tuple[slice, slice]:
    """Source/destination slices that center ``n_in`` voxels in ``n_out``.

    An odd difference leaves the extra voxel on the high-index side.
    """
    if n_out <= n_in:
        start = (n_in - n_out) // 2
        return slice(start, start + n_out), slice(0, n_out)
    start = (n_out - n_in) // 2
    return slice(0, n_in), slice(start, start + n_in)


def crop_pad(v: Volume3D, target_nx: int, target_ny: int, target_nz: int) -> Volume3D:
    target = (int(target_nx), int(target_ny), int(target_nz))
    if min(target) < 1:
        raise ValueError(f"target dims must be positive, got {target}")
    out = np.zeros(target, dtype=v.data.dtype)
    src, dst = zip(*(_center_slices(n, t) for n, t in zip(v.shape, target)))
    out[dst] = v.data[src]
    return v.with_data(out)


def sample_trilinear(v: Volume3D, point) -> float:
    """Trilinear value at a physical point (mm); voxel i is centred at (i + 0.5) * spacing.

    Points in the outer half-voxel rim clamp to the edge voxel value.
    """
    p = np.asarray(point, dtype=np.float64)
    if p.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {p.shape}")
    return float(sample_points(v, p[None])[0])


def sample_points(v: Volume3D, points: np.ndarray) -> np.ndarray:
    """Vectorised trilinear sampling of an (m, 3) array of physical points."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    shape = np.asarray(v.shape)
    spacing = np.asarray(v.spacing)
    extent = shape * spacing
    bad = ~np.all(np.isfinite(p) & (p >= 0) & (p <= extent), axis=1)
    if np.any(bad):
        raise OutOfBoundsError(f"point {tuple(p[bad][0])} outside volume extent {tuple(extent)}")
    u = np.clip(p / spacing - 0.5, 0.0, shape - 1.0)
    i0 = np.clip(np.floor(u).astype(int), 0, np.maximum(shape - 2, 0))
    t = u - i0
    i1 = np.minimum(i0 + 1, shape - 1)
    d = v.data
    out = np.zeros(len(p))
    for dx in (0, 1):
        wx = t[:, 0] if dx else 1.0 - t[:, 0]
        ix = i1[:, 0] if dx else i0[:, 0]
        for dy in (0, 1):
            wy = t[:, 1] if dy else 1.0 - t[:, 1]
            iy = i1[:, 1] if dy else i0[:, 1]
            for dz in (0, 1):
                wz = t[:, 2] if dz else 1.0 - t[:, 2]
                iz = i1[:, 2] if dz else i0[:, 2]
                out += wx * wy * wz * d[ix, iy, iz]
    return out


def write_volume(v: Volume3D, path) -> None:
    header = _HEADER.pack(MAGIC, v.nx, v.ny, v.nz, *v.spacing)
    payload = np.asarray(v.data, dtype="<f4").tobytes(order="F")
    Path(path).write_bytes(header + payload)


def read_volume(path) -> Volume3D:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: expected magic {MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated ({len(raw)} bytes)")
    _, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(raw)
    if min(nx, ny, nz) == 0:
        raise ZeroDimensionError(f"{path}: zero dimension in header {nx}x{ny}x{nz}")
    expected = nx * ny * nz * 4
    payload = raw[_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: header declares {nx * ny * nz} scalars, payload holds {len(payload) // 4}"
        )
    if len(payload) > expected:
        raise VolumeFormatError(f"{path}: {len(payload) - expected} trailing bytes")
    data = np.frombuffer(payload, dtype="<f4").reshape((nx, ny, nz), order="F")
    return Volume3D(data.astype(np.float64), (sx, sy, sz))
