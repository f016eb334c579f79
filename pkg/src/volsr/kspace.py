"""Synthetic low-resolution forward model.

The high-resolution volume is Fourier transformed, the outer part of k-space is
zeroed along the phase (y) and slice (z) axes, partial Fourier is simulated by
zeroing further lines on the negative-frequency edge, and the magnitude of the
inverse transform is returned on the original grid. The readout axis (x) is
never touched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .volume import Volume3D, crop_pad, normalize

# absorbs representation error in products like 0.3 * 20 / 2
_EPS = 1e-9


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DegradeConfig:
    frac_y: float = 0.5
    frac_z: float = 0.5
    pf_y: float = 0.75
    pf_z: float = 0.75

    def __post_init__(self):
        for name in ("frac_y", "frac_z"):
            f = getattr(self, name)
            if not 0.0 < f <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1], got {f}")
        for name in ("pf_y", "pf_z"):
            p = getattr(self, name)
            if not 0.5 < p <= 1.0:
                raise ConfigError(f"{name} must lie in (0.5, 1], got {p}")

    @classmethod
    def uniform(cls, frac: float, pf: float, axes: str = "yz") -> "DegradeConfig":
        """Same fraction on every listed axis; unlisted axes are left fully sampled."""
        bad = set(axes) - {"y", "z"}
        if bad or not axes:
            raise ConfigError(f"axes must be a non-empty subset of 'yz', got {axes!r}")
        return cls(
            frac_y=frac if "y" in axes else 1.0,
            frac_z=frac if "z" in axes else 1.0,
            pf_y=pf if "y" in axes else 1.0,
            pf_z=pf if "z" in axes else 1.0,
        )


@dataclass(frozen=True)
class SamplingMask:
    """Keep/zero flags over centred line indices ``c = i - n // 2``."""

    keep: np.ndarray

    @property
    def n(self) -> int:
        return len(self.keep)

    @property
    def count(self) -> int:
        return int(self.keep.sum())

    def centered_indices(self) -> np.ndarray:
        return np.flatnonzero(self.keep) - self.n // 2

    def unshifted(self) -> np.ndarray:
        """The same mask in numpy FFT (DC-first) order."""
        return np.fft.ifftshift(self.keep)


def band_half_width(n: int, frac: float) -> int:
    return int(math.floor(frac * n / 2 + _EPS))


def kept_line_count(n: int, frac: float, pf: float) -> int:
    return int(math.ceil(pf * 2 * band_half_width(n, frac) - _EPS))


def build_mask(n: int, frac: float, pf: float) -> SamplingMask:
    if n < 2:
        raise ConfigError(f"need at least 2 k-space lines, got {n}")
    if not 0.0 < frac <= 1.0 or not 0.5 < pf <= 1.0:
        raise ConfigError(f"invalid fraction {frac} or partial Fourier {pf}")
    if frac * n < 2 - _EPS:
        raise ConfigError(f"frac={frac} keeps fewer than 2 of {n} lines")
    h = band_half_width(n, frac)
    kept = kept_line_count(n, frac, pf)
    centered = np.arange(n) - n // 2
    keep = (centered >= h - kept) & (centered <= h - 1)
    return SamplingMask(keep)


def kspace_filter(shape, cfg: DegradeConfig) -> np.ndarray:
    """Separable 0/1 weight over the unshifted 3D spectrum (broadcastable)."""
    _, ny, nz = shape
    my = build_mask(ny, cfg.frac_y, cfg.pf_y).unshifted()
    mz = build_mask(nz, cfg.frac_z, cfg.pf_z).unshifted()
    return (my[:, None] & mz[None, :])[None, :, :]


def degrade_complex(v: Volume3D, cfg: DegradeConfig) -> np.ndarray:
    """Masked inverse transform before the magnitude is taken."""
    data = np.asarray(v.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError("volume contains non-finite values")
    spectrum = np.fft.fftn(data)
    spectrum *= kspace_filter(data.shape, cfg)
    return np.fft.ifftn(spectrum)


def degrade(v: Volume3D, cfg: DegradeConfig) -> Volume3D:
    return v.with_data(np.abs(degrade_complex(v, cfg)))


def make_training_pair(
    hr: Volume3D,
    cfg: DegradeConfig,
    grid: tuple[int, int, int] = (256, 256, 96),
    window: tuple[int, int] = (192, 192),
) -> tuple[Volume3D, Volume3D]:
    """Return ``(low_res_input, high_res_target)``, both cropped and normalised.

    ``grid`` is the canonical matrix the volume is cropped/padded to before
    degradation; ``window`` is the in-plane training crop (all slices kept).
    """
    if window[0] > grid[0] or window[1] > grid[1]:
        raise ConfigError(f"training window {window} larger than canonical grid {grid[:2]}")
    canonical = crop_pad(hr, *grid)
    low = degrade(canonical, cfg)
    out = []
    for vol in (low, canonical):
        vol = crop_pad(vol, window[0], window[1], grid[2])
        out.append(normalize(vol))
    return out[0], out[1]


def default_window(grid) -> tuple[int, int]:
    """In-plane training window at the 192/256 ratio of the clinical setup."""
    return (grid[0] * 3 // 4, grid[1] * 3 // 4)
