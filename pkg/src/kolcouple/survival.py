"""Survival-curve estimation and power-law rate fitting."""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.stats import norm

__all__ = ["SurvivalCurve", "wilson_interval", "estimate_survival", "survival_from_counts",
           "fit_rate", "default_window", "tail_window"]


def wilson_interval(successes, n, level=0.95):
    """Wilson score interval for a binomial proportion; arrays broadcast."""
    successes = np.asarray(successes, dtype=float)
    n = np.asarray(n, dtype=float)
    zc = norm.ppf(0.5 + level / 2.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = successes / n
        denom = 1.0 + zc**2 / n
        centre = (p + zc**2 / (2 * n)) / denom
        half = zc * np.sqrt(p * (1 - p) / n + zc**2 / (4 * n * n)) / denom
    return np.clip(centre - half, 0.0, 1.0), np.clip(centre + half, 0.0, 1.0)


@dataclass
class SurvivalCurve:
    """Estimates of ``P(tau > t)`` on a grid.

    Grid points beyond the earliest censoring time carry ``nan`` estimates,
    since censored replicates say nothing about survival past their horizon.
    """

    times: np.ndarray
    estimates: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    n_at_risk: np.ndarray
    n_total: int
    fit: dict = field(default=None)

    def rows(self):
        return zip(self.times, self.estimates, self.ci_lo, self.ci_hi, self.n_at_risk)


def survival_from_counts(times, survivors, n_total, valid=None):
    times = np.asarray(times, dtype=float)
    survivors = np.asarray(survivors, dtype=float)
    if valid is None:
        valid = np.ones(times.shape, dtype=bool)
    est = np.where(valid, survivors / n_total, np.nan)
    lo, hi = wilson_interval(survivors, n_total)
    lo = np.where(valid, lo, np.nan)
    hi = np.where(valid, hi, np.nan)
    return SurvivalCurve(times, est, lo, hi, survivors.astype(np.int64), int(n_total))


def estimate_survival(outcomes, grid):
    """Empirical survival curve from coupling outcomes.

    Parameters
    ----------
    outcomes : sequence
        Objects with ``coupled``, ``tau`` and ``t_max`` attributes.  A censored
        replicate is treated as surviving up to its ``t_max``.
    grid : array_like
        Increasing time points.
    """
    if len(outcomes) == 0:
        raise ValueError("no outcomes to estimate from")
    grid = np.asarray(grid, dtype=float)
    tau = np.array([o.tau if o.coupled else np.inf for o in outcomes])
    horizon = min((o.t_max for o in outcomes if not o.coupled), default=np.inf)
    survivors = (tau[None, :] > grid[:, None]).sum(axis=1)
    return survival_from_counts(grid, survivors, len(outcomes), valid=grid <= horizon)


def fit_rate(curve, window=None):
    """Slope of ``log P(tau > t)`` against ``log t`` by weighted least squares.

    Weights are inverse variances of ``log`` estimates taken from the CI
    widths.  Returns ``(slope, stderr)``; ``stderr`` is 0 for an exact fit.
    """
    if window is None:
        window = default_window(curve)
    lo_t, hi_t = window
    t, s = curve.times, curve.estimates
    keep = (t >= lo_t) & (t <= hi_t) & np.isfinite(s) & (s > 0) & (s < 1)
    if keep.sum() < 4:
        raise ValueError(f"need at least 4 grid points with estimates in (0, 1) inside {window}")
    x, y = np.log(t[keep]), np.log(s[keep])
    width = (np.log(curve.ci_hi[keep]) - np.log(np.maximum(curve.ci_lo[keep], 1e-300))) / (2 * 1.96)
    w = 1.0 / width**2 if np.all(width > 0) else np.ones_like(x)
    w = w / w.sum()
    xm, ym = w @ x, w @ y
    sxx = w @ (x - xm) ** 2
    slope = (w @ ((x - xm) * (y - ym))) / sxx
    resid = y - ym - slope * (x - xm)
    dof = keep.sum() - 2
    # scale by the residual spread so a noiseless fit reports zero error
    stderr = math.sqrt(max(w @ resid**2, 0.0) / dof / sxx) if dof > 0 else math.nan
    return float(slope), float(stderr)


def default_window(curve, low=0.01, high=0.5):
    """Widest span of one decade (in ``t``) where every estimate lies in ``[low, high]``."""
    t, s = curve.times, curve.estimates
    ok = np.isfinite(s) & (s >= low) & (s <= high) & (t > 0)
    best = None
    for i in np.flatnonzero(ok):
        j = i
        while j + 1 < t.size and ok[j + 1]:
            j += 1
        if t[j] >= 10 * t[i] * (1 - 1e-12):
            stop = np.searchsorted(t, 10 * t[i] * (1 + 1e-12), side="right") - 1
            span = (t[i], t[stop])
            # prefer the latest decade: deepest into the asymptotic regime
            best = span
    if best is None:
        raise ValueError("no decade of the curve has all estimates within [%g, %g]" % (low, high))
    return best


def tail_window(curve, high=0.1, min_survivors=50):
    """Span of grid points in the tail regime that still carry enough data.

    Keeps points with estimate at most ``high`` and at least ``min_survivors``
    surviving replicates (relative error about 15% or better).  Suited to
    sparse grids such as geometric block ends, where a decade may hold fewer
    than four points.
    """
    s = curve.estimates
    ok = np.isfinite(s) & (s <= high) & (s > 0) & (curve.n_at_risk >= min_survivors)
    idx = np.flatnonzero(ok)
    if idx.size < 4:
        raise ValueError("fewer than 4 grid points in the tail regime")
    return curve.times[idx[0]], curve.times[idx[-1]]
