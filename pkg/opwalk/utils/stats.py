"""Estimates, trend fits and error bars used across diagnostics."""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class Estimate:
    """A Monte Carlo estimate with its standard error."""

    value: float
    stderr: float
    samples: int


@dataclass(frozen=True)
class TrendFit:
    """Least-squares line y = intercept + slope * x."""

    slope: float
    intercept: float
    r_squared: float
    stderr: float


def mean_estimate(values) -> Estimate:
    """Sample mean with standard error of the mean (0 for a single sample)."""
    values = np.asarray(values, dtype=np.float64)
    count = values.size
    if count == 0:
        return Estimate(float("nan"), float("nan"), 0)
    stderr = float(values.std(ddof=1) / np.sqrt(count)) if count > 1 else 0.0
    return Estimate(float(values.mean()), stderr, int(count))


def binomial_estimate(hits: int, trials: int) -> Estimate:
    if trials <= 0:
        return Estimate(float("nan"), float("nan"), 0)
    freq = hits / trials
    return Estimate(float(freq), float(np.sqrt(freq * (1.0 - freq) / trials)), int(trials))


def linear_fit(x: Sequence[float], y: Sequence[float]) -> TrendFit:
    result = stats.linregress(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    return TrendFit(slope=float(result.slope), intercept=float(result.intercept),
                    r_squared=float(result.rvalue ** 2), stderr=float(result.stderr))


def loglinear_fit(x: Sequence[float], y: Sequence[float]) -> TrendFit:
    """Fit log(y) against x; non-positive y are dropped."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    keep = y > 0
    return linear_fit(x[keep], np.log(y[keep]))


def is_strictly_decreasing(values: Sequence[float]) -> bool:
    values = np.asarray(values, dtype=np.float64)
    return bool(np.all(np.diff(values) < 0))


def is_non_increasing(values: Sequence[float], rel_tol: float = 0.0) -> bool:
    values = np.asarray(values, dtype=np.float64)
    return bool(np.all(values[1:] <= values[:-1] * (1.0 + rel_tol)))


def median_by(values: np.ndarray, axis: int = 0) -> np.ndarray:
    """Median over seeds (rows by default)."""
    return np.median(np.asarray(values, dtype=np.float64), axis=axis)


def chi_square_pvalue(observed: np.ndarray, expected_probs: np.ndarray,
                      min_expected: Optional[float] = 5.0) -> float:
    """
    Goodness-of-fit p-value of counts against probabilities.

    Cells with expected count below ``min_expected`` are pooled into one.
    """
    observed = np.asarray(observed, dtype=np.float64).ravel()
    expected = np.asarray(expected_probs, dtype=np.float64).ravel() * observed.sum()
    if min_expected is not None:
        small = expected < min_expected
        if small.any():
            observed = np.append(observed[~small], observed[small].sum())
            expected = np.append(expected[~small], expected[small].sum())
            if expected[-1] == 0:
                observed, expected = observed[:-1], expected[:-1]
    return float(stats.chisquare(observed, expected).pvalue)
