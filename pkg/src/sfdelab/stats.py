"""Deterministic reductions and the small statistical tests used by the diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as _st

__all__ = ["MannKendall", "mann_kendall", "mean_se", "ols", "tree_sum", "upper_bound", "Z99"]

Z99 = float(_st.norm.ppf(0.99))


def tree_sum(values: np.ndarray) -> np.ndarray:
    """Pairwise sum along axis 0 in index order.

    The reduction tree depends only on the number of rows, so the result is
    independent of how the rows were produced (threads, chunking).
    """
    v = np.asarray(values, dtype=float)
    if v.shape[0] == 0:
        return np.zeros(v.shape[1:])
    while v.shape[0] > 1:
        if v.shape[0] % 2:
            v = np.concatenate([v[:-1:2] + v[1::2], v[-1:]])
        else:
            v = v[0::2] + v[1::2]
    return v[0]


def mean_se(values: np.ndarray) -> tuple[float, float]:
    """Sample mean and its standard error along axis 0."""
    v = np.asarray(values, dtype=float)
    n = v.shape[0]
    if n == 0:
        return math.nan, math.nan
    mean = tree_sum(v) / n
    if n == 1:
        return float(mean), 0.0
    var = tree_sum((v - mean) ** 2) / (n - 1)
    return float(mean), float(math.sqrt(var / n))


def upper_bound(values: np.ndarray, z: float = Z99) -> float:
    """One-sided upper confidence bound ``mean + z·SE``."""
    m, se = mean_se(values)
    return m + z * se


@dataclass(frozen=True)
class MannKendall:
    S: float
    var_S: float
    z: float
    p_increasing: float

    def increasing(self, alpha: float = 0.05) -> bool:
        return self.p_increasing < alpha


def mann_kendall(series) -> MannKendall:
    """One-sided Mann–Kendall test for an increasing trend, with tie correction."""
    x = np.asarray(series, dtype=float)
    n = x.size
    if n < 3:
        return MannKendall(0.0, 0.0, 0.0, 1.0)
    diff = np.sign(x[None, :] - x[:, None])
    S = float(np.sum(np.triu(diff, 1)))
    _, counts = np.unique(x, return_counts=True)
    ties = np.sum(counts * (counts - 1) * (2 * counts + 5))
    var = (n * (n - 1) * (2 * n + 5) - ties) / 18.0
    if var <= 0:
        return MannKendall(S, 0.0, 0.0, 1.0)
    if S > 0:
        z = (S - 1) / math.sqrt(var)
    elif S < 0:
        z = (S + 1) / math.sqrt(var)
    else:
        z = 0.0
    return MannKendall(S, float(var), float(z), float(_st.norm.sf(z)))


def ols(x, y) -> tuple[float, float]:
    """Least-squares ``y ≈ slope·x + intercept``; returns ``(slope, intercept)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx == 0:
        return math.nan, float(ym)
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    return slope, float(ym - slope * xm)
