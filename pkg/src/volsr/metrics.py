"""Image-quality measures: MSE, windowed SSIM, ray-profile edge sharpness, SNR and CNR."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import uniform_filter

from .volume import MeasurementFailed, Roi3D, Volume3D, sample_points


class UndefinedRatio(ZeroDivisionError):
    pass


@dataclass(frozen=True)
class SsimConfig:
    window: int = 7
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"SSIM window must be odd and >= 3, got {self.window}")
        if self.k1 <= 0 or self.k2 <= 0 or self.data_range <= 0:
            raise ValueError("SSIM constants and data range must be positive")


@dataclass
class MetricReport:
    volume_id: str
    ssim: float
    mse: float
    edge_sharpness: Optional[float] = None
    snr: Optional[float] = None
    cnr: Optional[float] = None


def _pair(a, b):
    da = a.data if isinstance(a, Volume3D) else np.asarray(a)
    db = b.data if isinstance(b, Volume3D) else np.asarray(b)
    if da.shape != db.shape:
        raise ValueError(f"dimension mismatch: {da.shape} vs {db.shape}")
    return np.asarray(da, dtype=np.float64), np.asarray(db, dtype=np.float64)


def mse(a, b) -> float:
    x, y = _pair(a, b)
    return float(np.mean((x - y) ** 2))


def ssim_map(a, b, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    """Per-voxel SSIM; windows near the border reuse clamped edge voxels."""
    x, y = _pair(a, b)
    if any(cfg.window > n for n in x.shape):
        raise ValueError(f"SSIM window {cfg.window} larger than volume {x.shape}")
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2

    def local_mean(z):
        return uniform_filter(z, size=cfg.window, mode="nearest")

    mx = local_mean(x)
    my = local_mean(y)
    vx = local_mean(x * x) - mx * mx
    vy = local_mean(y * y) - my * my
    cxy = local_mean(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return num / den


def ssim(a, b, cfg: SsimConfig = SsimConfig()) -> float:
    return float(ssim_map(a, b, cfg).mean())


# ---------------------------------------------------------------- edge sharpness


def circle_contour(center, radius: float, normal=(1.0, 0.0, 0.0), n_points: int = 720) -> np.ndarray:
    """Closed polygon approximating a circle in the plane orthogonal to ``normal``."""
    nrm = np.asarray(normal, dtype=np.float64)
    nrm /= np.linalg.norm(nrm)
    helper = np.eye(3)[np.argmin(np.abs(nrm))]
    u = np.cross(nrm, helper)
    u /= np.linalg.norm(u)
    w = np.cross(nrm, u)
    theta = 2 * np.pi * np.arange(n_points) / n_points
    return np.asarray(center, dtype=np.float64) + radius * (
        np.cos(theta)[:, None] * u + np.sin(theta)[:, None] * w
    )


def contour_rays(contour, n_rays: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Equally spaced positions (by arc length) on a closed planar polygon and outward normals.

    Positions sit at the middle of each of ``n_rays`` equal arc-length intervals;
    the normal at a position is taken from the polygon edge it lies on.
    """
    pts = np.asarray(contour, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 3:
        raise ValueError("contour must be an (m >= 3, 3) array of points")
    centroid = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - centroid)
    plane_normal = vt[-1]
    edges = np.roll(pts, -1, axis=0) - pts
    lengths = np.linalg.norm(edges, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    perimeter = cum[-1]
    s = (np.arange(n_rays) + 0.5) * perimeter / n_rays
    seg = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(pts) - 1)
    frac = (s - cum[seg]) / lengths[seg]
    pos = pts[seg] + frac[:, None] * edges[seg]
    tangent = edges[seg] / lengths[seg, None]
    normal = np.cross(tangent, plane_normal)
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    flip = np.einsum("ij,ij->i", normal, pos - centroid) < 0
    normal[flip] *= -1
    return pos, normal


def profile_max_gradient(profile: np.ndarray, step: float) -> Optional[float]:
    """Max |central difference| of the [0, 1]-normalised profile, or None if it is flat."""
    lo, hi = profile.min(), profile.max()
    # interpolation weights need not sum to exactly 1, so allow round-off
    if hi - lo <= 1e-12 * max(abs(hi), abs(lo), 1.0):
        return None
    p = (profile - lo) / (hi - lo)
    return float(np.max(np.abs(p[2:] - p[:-2])) / (2 * step))


def edge_sharpness(v: Volume3D, contour, n_rays: int = 60, half_length: float = 3.0,
                   step: Optional[float] = None) -> float:
    """Mean over boundary rays of the steepest normalised intensity gradient (mm^-1)."""
    if step is None:
        step = 0.1 * min(v.spacing)
    pos, normal = contour_rays(contour, n_rays)
    m = int(round(half_length / step))
    t = np.arange(-m, m + 1) * step
    values = []
    for p0, n in zip(pos, normal):
        prof = sample_points(v, p0 + t[:, None] * n)
        g = profile_max_gradient(prof, step)
        if g is not None:
            values.append(g)
    if not values:
        raise MeasurementFailed("every edge profile was flat")
    return float(np.mean(values))


# ---------------------------------------------------------------- ROI ratios


def _roi_mean(v: Volume3D, roi: Roi3D) -> float:
    return float(np.mean(roi.values(v)))


def _ratio(num: float, den: float, what: str) -> float:
    if den == 0:
        raise UndefinedRatio(f"{what}: denominator ROI has zero mean")
    return num / den


def snr(v: Volume3D, blood: Roi3D, lung: Roi3D) -> float:
    return _ratio(_roi_mean(v, blood), _roi_mean(v, lung), "SNR")


def cnr(v: Volume3D, blood: Roi3D, myocardium: Roi3D) -> float:
    return _ratio(_roi_mean(v, blood), _roi_mean(v, myocardium), "CNR")


REPORT_FIELDS = ["id", "ssim", "mse", "edge_sharpness_mm_inv", "snr", "cnr"]


def write_report(path, reports) -> None:
    def cell(x):
        return "" if x is None else repr(float(x))

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for r in reports:
            w.writerow([r.volume_id, cell(r.ssim), cell(r.mse), cell(r.edge_sharpness),
                        cell(r.snr), cell(r.cnr)])
