"""Deterministic cardiac-like test volumes with analytically known geometry."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage
from scipy.special import erfc

from .volume import MeasurementFailed, Roi3D, Volume3D, sample_points


class PhantomSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    intensity: float

    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        # first-order SDF approximation; exact on spheres
        r = np.asarray(self.radii, dtype=np.float64)
        q = pts - np.asarray(self.center)
        k0 = np.linalg.norm(q / r, axis=-1)
        k1 = np.linalg.norm(q / (r * r), axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            sd = k0 * (k0 - 1.0) / k1
        return np.where(k1 > 0, sd, -r.min())

    def bounds(self):
        c = np.asarray(self.center)
        r = np.asarray(self.radii)
        return c - r, c + r


@dataclass(frozen=True)
class Cylinder:
    """Capped cylinder; ``axis`` is normalised on construction."""

    center: tuple[float, float, float]
    axis: tuple[float, float, float]
    radius: float
    length: float
    intensity: float

    def __post_init__(self):
        a = np.asarray(self.axis, dtype=np.float64)
        norm = np.linalg.norm(a)
        if norm == 0:
            raise PhantomSpecError("cylinder axis must be non-zero")
        object.__setattr__(self, "axis", tuple(float(x) for x in a / norm))

    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        a = np.asarray(self.axis)
        q = pts - np.asarray(self.center)
        along = q @ a
        radial = np.linalg.norm(q - along[..., None] * a, axis=-1)
        dr = radial - self.radius
        dl = np.abs(along) - self.length / 2
        outside = np.hypot(np.maximum(dr, 0), np.maximum(dl, 0))
        return np.minimum(np.maximum(dr, dl), 0) + outside

    def bounds(self):
        a = np.asarray(self.axis)
        c = np.asarray(self.center)
        ends = np.stack([c - a * self.length / 2, c + a * self.length / 2])
        # end-cap disks reach r * sqrt(1 - a_i^2) along coordinate axis i
        pad = self.radius * np.sqrt(np.clip(1.0 - a * a, 0.0, None))
        return ends.min(0) - pad, ends.max(0) + pad


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.6, 1.6, 1.6)
    seed: int = 0
    primitives: tuple = ()
    background: float = 0.05
    softness: float = 0.0
    noise_sigma: float = 0.0
    rois: dict = field(default_factory=dict)

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise PhantomSpecError(f"bad grid dims {self.dims}")
        if min(self.spacing) <= 0:
            raise PhantomSpecError(f"bad spacing {self.spacing}")
        if self.noise_sigma < 0 or self.softness < 0:
            raise PhantomSpecError("noise sigma and softness must be non-negative")
        extent = np.asarray(self.dims) * np.asarray(self.spacing)
        for prim in (None, *self.primitives):
            level = self.background if prim is None else prim.intensity
            if not 0.0 <= level <= 1.0:
                raise PhantomSpecError(f"intensity {level} outside [0, 1]")
            if prim is not None:
                lo, hi = prim.bounds()
                if np.any(lo < -1e-9) or np.any(hi > extent + 1e-9):
                    raise PhantomSpecError(f"primitive {prim} extends outside the grid")
        rois = list(self.rois.values())
        for i, a in enumerate(rois):
            a.check_inside(self.dims)
            for b in rois[i + 1:]:
                if a.overlaps(b):
                    raise PhantomSpecError(f"ROIs {a.name!r} and {b.name!r} overlap")


@dataclass(frozen=True)
class VesselTruth:
    vessel_id: int
    diameter: float
    center: tuple[float, float, float]
    axis: tuple[float, float, float]


@dataclass(frozen=True)
class PhantomTruth:
    vessels: tuple[VesselTruth, ...]
    rois: dict


def voxel_centers(dims, spacing) -> np.ndarray:
    axes = [(np.arange(n) + 0.5) * s for n, s in zip(dims, spacing)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _membership(sd: np.ndarray, softness: float) -> np.ndarray:
    if softness == 0:
        return (sd <= 0).astype(np.float64)
    # half-space convolved with a Gaussian of width `softness`
    return 0.5 * erfc(sd / (softness * np.sqrt(2.0)))


def generate(spec: PhantomSpec) -> tuple[Volume3D, PhantomTruth]:
    spec.validate()
    pts = voxel_centers(spec.dims, spec.spacing)
    data = np.full(tuple(spec.dims), float(spec.background))
    vessels = []
    for prim in spec.primitives:
        m = _membership(prim.signed_distance(pts), spec.softness)
        data = data * (1.0 - m) + prim.intensity * m
        if isinstance(prim, Cylinder):
            vessels.append(VesselTruth(len(vessels), 2.0 * prim.radius, prim.center, prim.axis))
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        data = data + rng.normal(0.0, spec.noise_sigma, data.shape)
    np.clip(data, 0.0, 1.0, out=data)
    return Volume3D(data, spec.spacing), PhantomTruth(tuple(vessels), dict(spec.rois))


def label_map(spec: PhantomSpec) -> np.ndarray:
    """Index of the last primitive covering each voxel centre (0 = background)."""
    pts = voxel_centers(spec.dims, spec.spacing)
    labels = np.zeros(tuple(spec.dims), dtype=np.int32)
    for i, prim in enumerate(spec.primitives, start=1):
        labels[prim.signed_distance(pts) <= 0] = i
    return labels


def _find_box(inside: np.ndarray, size: int, rng: np.random.Generator):
    """Random ``size``-cube fully inside the boolean mask, or None."""
    fits = sliding_window_view(inside, (size,) * 3).all(axis=(-3, -2, -1))
    candidates = np.argwhere(fits)
    if len(candidates) == 0:
        return None
    lo = candidates[rng.integers(len(candidates))]
    return tuple(int(v) for v in lo), tuple(int(v) + size for v in lo)


def _profile_blocked(yz, radius, placed, heart, x_mid, reach, margin=2.0) -> bool:
    """True if the y/z measurement lines through a new vessel would meet other structures."""
    for q, r in placed:
        gap = np.abs(q - yz)
        if np.hypot(*gap) < radius + r + margin:
            return True
        # either axis-aligned profile passing through the other vessel
        for a, b in ((0, 1), (1, 0)):
            if gap[b] < r + margin and gap[a] < reach + r + margin:
                return True
    t = np.linspace(-reach - radius, reach + radius, 97)
    for axis in (0, 1):
        pts = np.tile([x_mid, yz[0], yz[1]], (len(t), 1))
        pts[:, 1 + axis] += t
        if np.any(heart.signed_distance(pts) < margin):
            return True
    # also keep the vessel body itself outside the heart at every x
    return bool(np.hypot(*((yz - np.asarray(heart.center[1:])) / np.asarray(heart.radii[1:]))) < 1.0)


def random_spec(
    seed: int,
    dims=(64, 64, 32),
    spacing=(1.6, 1.6, 1.6),
    n_vessels: int = 3,
    softness: float = 1.6,
    noise_sigma: float = 0.01,
    roi_size: int = 3,
    window=None,
) -> PhantomSpec:
    """A randomised heart-in-thorax layout: myocardium shell, blood chambers, vessels along x.

    ``window`` is an optional centred in-plane (x, y) voxel window; vessels and
    ROIs are kept inside it so they survive a later crop to that window.
    """
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    extent = np.asarray(dims) * np.asarray(spacing)
    win = dims[:2] if window is None else tuple(int(w) for w in window)
    # first kept voxel of the centred crop, per in-plane axis
    win_lo = [(n - w) // 2 for n, w in zip(dims[:2], win)]
    y_lo = win_lo[1] * spacing[1]
    y_hi = (win_lo[1] + win[1]) * spacing[1]

    heart_r = extent * rng.uniform([0.16, 0.14, 0.22], [0.2, 0.18, 0.28])
    heart_c = extent / 2 + rng.uniform(-0.04, 0.04, 3) * extent
    heart_c[1] -= 0.12 * extent[1]
    myo_level = float(rng.uniform(0.25, 0.35))
    prims: list = [Ellipsoid(tuple(map(float, heart_c)), tuple(map(float, heart_r)), myo_level)]
    n_chambers = int(rng.integers(1, 3))
    for k in range(n_chambers):
        offset = np.zeros(3)
        if n_chambers == 2:
            offset[0] = (-0.3 if k == 0 else 0.3) * heart_r[0]
        scale = rng.uniform(0.42, 0.48) if n_chambers == 2 else rng.uniform(0.45, 0.55)
        chamber = Ellipsoid(tuple(map(float, heart_c + offset)), tuple(map(float, heart_r * scale)),
                            float(rng.uniform(0.85, 0.95)))
        prims.append(chamber)

    length = float(extent[0] - 4 * spacing[0])
    heart = prims[0]
    reach = 12.0  # profile half-length used by measure_diameter
    placed: list[tuple[np.ndarray, float]] = []
    for _ in range(5000):
        if len(placed) == n_vessels:
            break
        radius = float(rng.uniform(2.0, 4.5))
        yz = rng.uniform([y_lo + radius + 6.0, radius + 6.0],
                         [y_hi - radius - 6.0, extent[2] - radius - 6.0])
        if _profile_blocked(yz, radius, placed, heart, extent[0] / 2, reach):
            continue
        placed.append((yz, radius))
    else:
        raise PhantomSpecError(f"could not place {n_vessels} vessels in grid {dims}")
    for yz, radius in placed:
        center = (float(extent[0] / 2), float(yz[0]), float(yz[1]))
        prims.append(Cylinder(center, (1.0, 0.0, 0.0), radius, length, float(rng.uniform(0.8, 0.95))))

    base = PhantomSpec(dims, spacing, seed, tuple(prims), background=0.05,
                       softness=softness, noise_sigma=noise_sigma)
    labels = label_map(base)
    # ROIs sit at least one voxel away from any boundary so soft edges don't leak in
    chambers = np.isin(labels, list(range(2, 2 + n_chambers)))
    myo = labels == 1
    lung = labels == 0
    inside = np.zeros(dims, dtype=bool)
    inside[win_lo[0]:win_lo[0] + win[0], win_lo[1]:win_lo[1] + win[1], :] = True
    rois = {}
    for name, mask in (("blood", chambers), ("myocardium", myo), ("lung", lung)):
        core = ndimage.binary_erosion(mask, border_value=0) & inside
        box = _find_box(core, roi_size, rng)
        if box is None:
            raise PhantomSpecError(f"no room for a {roi_size}^3 {name} ROI")
        rois[name] = Roi3D(box[0], box[1], name)
    return PhantomSpec(dims, spacing, seed, tuple(prims), background=0.05,
                       softness=softness, noise_sigma=noise_sigma, rois=rois)


def corpus_specs(count: int, seed: int, max_tries: int = 100, **kwargs) -> list[PhantomSpec]:
    """``count`` random layouts from consecutive sub-seeds of ``seed``.

    Sub-seeds whose layout cannot be placed are skipped, so the corpus stays a
    deterministic function of ``seed``.
    """
    specs = []
    sub = seed * 100_000
    misses = 0
    while len(specs) < count:
        try:
            specs.append(random_spec(sub, **kwargs))
            misses = 0
        except PhantomSpecError:
            misses += 1
            if misses >= max_tries:
                raise
        sub += 1
    return specs


def _perpendiculars(axis) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    helper = np.eye(3)[np.argmin(np.abs(a))]
    u = np.cross(a, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(a, u)


def fwhm_width(t: np.ndarray, profile: np.ndarray, center_halfwidth: float = 0.0,
               end_fraction: float = 0.1) -> float:
    """Full width at half height of the bright structure around ``t = 0``.

    Background is the mean of the outer ``end_fraction`` of samples on both
    sides; the vessel level is the mean within ``center_halfwidth`` of t = 0.
    Crossings are linearly interpolated.
    """
    n = len(profile)
    k = max(2, int(round(end_fraction * n)))
    ends = np.concatenate([profile[:k], profile[-k:]])
    background = ends.mean()
    c = int(np.argmin(np.abs(t)))
    plateau = profile[np.abs(t) <= center_halfwidth + 1e-12].mean()
    spread = max(profile[:k].std(), profile[-k:].std())
    if plateau - background <= max(4 * spread, 1e-9):
        raise MeasurementFailed("no vessel contrast along profile")
    half = 0.5 * (background + plateau)
    if profile[c] <= half:
        raise MeasurementFailed("profile centre is below half maximum")
    i = c
    while i > 0 and profile[i - 1] > half:
        i -= 1
    j = c
    while j < n - 1 and profile[j + 1] > half:
        j += 1
    if i == 0 or j == n - 1:
        raise MeasurementFailed("half-maximum crossing not found within profile")

    def cross(a, b):
        fa, fb = profile[a] - half, profile[b] - half
        return t[a] + (t[b] - t[a]) * fa / (fa - fb)

    return cross(j, j + 1) - cross(i - 1, i)


def profile_along(v: Volume3D, point, direction, half_length: float, step: float):
    """Sample ``v`` along ``point + t * direction``, truncated to the volume extent."""
    point = np.asarray(point, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    m = int(round(half_length / step))
    t = np.arange(-m, m + 1) * step
    pts = point + t[:, None] * d
    extent = np.asarray(v.shape) * np.asarray(v.spacing)
    ok = np.all((pts >= 0) & (pts <= extent), axis=1)
    return t[ok], sample_points(v, pts[ok])


def measure_diameter(v: Volume3D, centerline, direction, half_length: float = 12.0) -> float:
    """Mean FWHM diameter (mm) over two perpendicular profiles through a vessel.

    ``direction`` is the vessel axis; profiles are taken along two unit vectors
    orthogonal to it and to each other.
    """
    step = 0.1 * min(v.spacing)
    widths = []
    for u in _perpendiculars(direction):
        t, prof = profile_along(v, centerline, u, half_length, step)
        if len(t) < 8:
            raise MeasurementFailed("profile too short")
        widths.append(fwhm_width(t, prof, center_halfwidth=0.5 * min(v.spacing)))
    return float(np.mean(widths))


def write_truth(path, rows) -> None:
    """Truth sidecar: one row per vessel, ROI boxes repeated per phantom."""
    fields = ["phantom_id", "vessel_id", "diameter_mm", "center_x", "center_y", "center_z",
              "axis_x", "axis_y", "axis_z", "blood_roi", "lung_roi", "myocardium_roi"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for phantom_id, truth in rows:
            boxes = [_fmt_roi(truth.rois.get(n)) for n in ("blood", "lung", "myocardium")]
            for vt in truth.vessels:
                w.writerow([phantom_id, vt.vessel_id, f"{vt.diameter:.6f}",
                            *(f"{c:.6f}" for c in vt.center), *(f"{a:.6f}" for a in vt.axis),
                            *boxes])


def _fmt_roi(roi) -> str:
    if roi is None:
        return ""
    return " ".join(str(v) for pair in zip(roi.lo, roi.hi) for v in pair)


def parse_roi(text: str, name: str = "") -> Roi3D:
    """Inverse of the sidecar box format ``lo_x hi_x lo_y hi_y lo_z hi_z``."""
    vals = [int(s) for s in text.split()]
    if len(vals) != 6:
        raise ValueError(f"ROI needs 6 integers, got {text!r}")
    return Roi3D(tuple(vals[0::2]), tuple(vals[1::2]), name)


def read_truth(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
