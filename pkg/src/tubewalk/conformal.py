"""Split conformal calibration of the GP terrain mean."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .terrain import GPModel, Observations, gp_mean, gp_predict


@dataclass(frozen=True)
class CPThreshold:
    c: float
    delta: float
    k: int
    quantile_index: int

    @property
    def unbounded(self) -> bool:
        return math.isinf(self.c)

    def report(self, empirical_coverage: float | None = None) -> dict:
        return {
            "delta": self.delta,
            "k": self.k,
            "quantile_index": self.quantile_index,
            "c": None if self.unbounded else self.c,
            "empirical_coverage": empirical_coverage,
        }


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def unbounded(self) -> bool:
        return math.isinf(self.lo) or math.isinf(self.hi)

    def __contains__(self, z) -> bool:
        return self.lo <= z <= self.hi


def nonconformity_scores(model: GPModel, cal: Observations) -> np.ndarray:
    if len(cal) == 0:
        raise ValueError("calibration set is empty")
    return np.abs(cal.z - gp_mean(model, cal.xi))


def quantile_index(k: int, delta: float) -> int:
    # guard against (k+1)(1-delta) landing a hair above an integer
    return math.ceil((k + 1) * (1.0 - delta) - 1e-9)


def cp_threshold(scores, delta: float) -> CPThreshold:
    """Return the p-th smallest score, p = ceil((k+1)(1-delta)), or +inf when p > k."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    s = np.sort(np.asarray(scores, dtype=float), kind="stable")
    k = s.size
    p = quantile_index(k, delta)
    c = float(s[p - 1]) if p <= k else math.inf
    return CPThreshold(c=c, delta=float(delta), k=k, quantile_index=p)


def prediction_interval(model: GPModel, thr: CPThreshold, xi) -> Interval:
    mean, _ = gp_predict(model, np.asarray(xi, dtype=float))
    if thr.unbounded:
        return Interval(-math.inf, math.inf)
    return Interval(mean - thr.c, mean + thr.c)


def empirical_coverage(model: GPModel, thr: CPThreshold, test: Observations) -> float:
    if len(test) == 0:
        raise ValueError("test set is empty")
    if thr.unbounded:
        return 1.0
    return float(np.mean(np.abs(test.z - gp_mean(model, test.xi)) <= thr.c))


@dataclass(frozen=True)
class WidthComparison:
    cp_width: float
    gp_width: float
    z_score: float
    sigma_avg: float

    @property
    def cp_half_width(self) -> float:
        return self.cp_width / 2

    @property
    def gp_half_width(self) -> float:
        return self.gp_width / 2


def gaussian_z_score(delta: float) -> float:
    """Two-sided standard-normal quantile with 1 - delta central mass."""
    return float(stats.norm.ppf(1.0 - delta / 2.0))


def interval_width_comparison(model: GPModel, thr: CPThreshold, grid_points) -> WidthComparison:
    _, var = gp_predict(model, np.atleast_2d(np.asarray(grid_points, dtype=float)))
    sigma_avg = float(np.mean(np.sqrt(var)))
    z = gaussian_z_score(thr.delta)
    return WidthComparison(cp_width=2 * thr.c, gp_width=2 * z * sigma_avg, z_score=z, sigma_avg=sigma_avg)
