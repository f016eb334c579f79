"""Agreement statistics: Bland-Altman limits and one-way intraclass correlation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np


class InsufficientData(ValueError):
    pass


class UndefinedICC(ValueError):
    pass


@dataclass(frozen=True)
class AgreementReport:
    n: int
    bias: float
    loa_low: float
    loa_high: float
    icc: float = float("nan")
    icc_ci_low: float = float("nan")
    icc_ci_high: float = float("nan")


def bland_altman(reference, test) -> tuple[float, float, float]:
    """Bias of ``test - reference`` and the limits bias +/- 1.96 SD (n - 1 denominator)."""
    ref = np.asarray(reference, dtype=np.float64)
    tst = np.asarray(test, dtype=np.float64)
    if ref.shape != tst.shape or ref.ndim != 1:
        raise ValueError("reference and test must be 1D and the same length")
    if len(ref) < 2:
        raise InsufficientData(f"Bland-Altman needs at least 2 pairs, got {len(ref)}")
    d = tst - ref
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    return bias, bias - 1.96 * sd, bias + 1.96 * sd


# ---------------------------------------------------------------- F distribution


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def f_cdf(x: float, d1: float, d2: float) -> float:
    if x <= 0:
        return 0.0
    return betainc(d1 / 2.0, d2 / 2.0, d1 * x / (d1 * x + d2))


def f_quantile(p: float, d1: float, d2: float) -> float:
    """Inverse F CDF by bisection on the beta-variable y = d1 x / (d1 x + d2)."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if d1 <= 0 or d2 <= 0:
        raise ValueError("degrees of freedom must be positive")
    a, b = d1 / 2.0, d2 / 2.0
    lo, hi = 0.0, 1.0
    while True:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if betainc(a, b, mid) < p:
            lo = mid
        else:
            hi = mid
    y = 0.5 * (lo + hi)
    return d2 * y / (d1 * (1.0 - y))


# ---------------------------------------------------------------- ICC


def oneway_anova(table) -> tuple[float, float, int, int]:
    """Between- and within-subject mean squares of an (n subjects x k raters) table."""
    x = np.asarray(table, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise InsufficientData(f"need at least 2 subjects x 2 raters, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("rating table has missing or non-finite cells")
    n, k = x.shape
    grand = x.mean()
    subj = x.mean(axis=1)
    ssb = k * np.sum((subj - grand) ** 2)
    ssw = np.sum((x - subj[:, None]) ** 2)
    return ssb / (n - 1), ssw / (n * (k - 1)), n, k


def icc_oneway(table, alpha: float = 0.05) -> tuple[float, float, float]:
    """ICC(1,1) with its F-based (1 - alpha) confidence interval."""
    msb, msw, n, k = oneway_anova(table)
    # relative threshold: a table that is constant up to round-off has no variance
    scale = max(float(np.max(np.abs(np.asarray(table, dtype=np.float64)))), 1.0) ** 2
    if msb <= 1e-28 * scale and msw <= 1e-28 * scale:
        raise UndefinedICC("both between- and within-subject variance are zero")
    icc = (msb - msw) / (msb + (k - 1) * msw)
    if msw == 0:
        return 1.0, 1.0, 1.0
    f_obs = msb / msw
    df1, df2 = n - 1, n * (k - 1)
    f_lower = f_obs / f_quantile(1 - alpha / 2, df1, df2)
    f_upper = f_obs * f_quantile(1 - alpha / 2, df2, df1)
    lo = (f_lower - 1) / (f_lower + k - 1)
    hi = (f_upper - 1) / (f_upper + k - 1)
    return float(icc), float(lo), float(hi)


def agreement(reference, test, ratings=None) -> AgreementReport:
    bias, lo, hi = bland_altman(reference, test)
    if ratings is None:
        return AgreementReport(len(reference), bias, lo, hi)
    icc, ci_lo, ci_hi = icc_oneway(ratings)
    return AgreementReport(len(reference), bias, lo, hi, icc, ci_lo, ci_hi)


# ---------------------------------------------------------------- CSV


def read_pairs(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    ids, ref, tst = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["id"])
            ref.append(float(row["reference"]))
            tst.append(float(row["test"]))
    return ids, np.array(ref), np.array(tst)


def read_ratings(path) -> np.ndarray:
    """Long-format ``subject, rater, value`` CSV to a dense subjects x raters table."""
    cells = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["subject"], row["rater"])
            if key in cells:
                raise ValueError(f"duplicate rating for subject {key[0]!r}, rater {key[1]!r}")
            cells[key] = float(row["value"])
    subjects = sorted({s for s, _ in cells}, key=_natural)
    raters = sorted({r for _, r in cells}, key=_natural)
    missing = [(s, r) for s in subjects for r in raters if (s, r) not in cells]
    if missing:
        raise ValueError(f"rating table has {len(missing)} missing cells, e.g. {missing[0]}")
    return np.array([[cells[s, r] for r in raters] for s in subjects])


def _natural(s: str):
    return (0, int(s), "") if s.lstrip("-").isdigit() else (1, 0, s)


AGREEMENT_FIELDS = ["n", "bias", "loa_low", "loa_high", "icc", "icc_ci_low", "icc_ci_high"]


def write_agreement(path, report: AgreementReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGREEMENT_FIELDS)
        w.writerow([report.n] + [repr(float(getattr(report, f))) for f in AGREEMENT_FIELDS[1:]])
