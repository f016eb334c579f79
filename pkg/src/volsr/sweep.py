"""Resolution sweep: feed a fixed trained network inputs degraded at 10%..100%."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .kspace import DegradeConfig, make_training_pair
from .net import NetworkConfig
from .train import score, super_resolve

log = logging.getLogger(__name__)

FRACTIONS = tuple(round(0.1 * i, 1) for i in range(1, 11))

_STATS = ["ssim_mean", "ssim_sd", "mse_mean", "mse_sd"]
SWEEP_FIELDS = (
    ["fraction"]
    + _STATS
    + [f"lr_{s}" for s in _STATS]
    # fully sampled control (p = 1), filled on the f = 1 row only
    + [f"pf1_{s}" for s in _STATS]
    + [f"pf1_lr_{s}" for s in _STATS]
)


@dataclass
class SweepReport:
    rows: list  # dicts keyed by SWEEP_FIELDS; control cells are None off the f = 1 row

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def best_fraction(self) -> float:
        """Fraction with the highest mean super-resolved SSIM (first one on ties)."""
        return self.rows[int(np.argmax(self.column("ssim_mean")))]["fraction"]

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SWEEP_FIELDS)
            for r in self.rows:
                w.writerow([f"{r['fraction']:.1f}"] + [_cell(r[k]) for k in SWEEP_FIELDS[1:]])


def _cell(x):
    return "" if x is None else repr(float(x))


def _evaluate(net_cfg, params, clean, cfg, grid, window):
    pairs = [make_training_pair(hr, cfg, grid, window) for hr in clean]
    lr = [p[0] for p in pairs]
    hr = [p[1] for p in pairs]
    return score(super_resolve(net_cfg, params, lr), hr), score(lr, hr)


def run_sweep(
    net_cfg: NetworkConfig,
    params: dict,
    clean,
    base: DegradeConfig = DegradeConfig(),
    grid=(256, 256, 96),
    window=(192, 192),
    fractions=FRACTIONS,
) -> SweepReport:
    """Degrade the clean test volumes at every fraction with partial Fourier held
    at ``base`` and score the network output and its input against the truth."""
    if not clean:
        raise ValueError("sweep needs at least one test volume")
    fractions = list(fractions)
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ValueError(f"fractions must be strictly increasing, got {fractions}")
    rows = []
    for f in fractions:
        cfg = DegradeConfig(frac_y=f, frac_z=f, pf_y=base.pf_y, pf_z=base.pf_z)
        sr, lr = _evaluate(net_cfg, params, clean, cfg, grid, window)
        row = {"fraction": f, **sr, **{f"lr_{k}": v for k, v in lr.items()}}
        if f == 1.0:
            sr1, lr1 = _evaluate(net_cfg, params, clean, DegradeConfig(1.0, 1.0, 1.0, 1.0), grid, window)
            row.update({f"pf1_{k}": v for k, v in sr1.items()})
            row.update({f"pf1_lr_{k}": v for k, v in lr1.items()})
        else:
            row.update({k: None for k in SWEEP_FIELDS if k.startswith("pf1_")})
        log.info("sweep f=%.1f  SR ssim %.4f  LR ssim %.4f", f, sr["ssim_mean"], lr["ssim_mean"])
        rows.append(row)
    return SweepReport(rows)


def read_sweep(path) -> SweepReport:
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            rows.append({k: (float(v) if v != "" else None) for k, v in raw.items()})
    return SweepReport(rows)
