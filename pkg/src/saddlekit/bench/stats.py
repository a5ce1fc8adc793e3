"""Paired-seed statistics for benchmark reports."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.stats import norm

__all__ = [
    "K_B_EV",
    "wilcoxon_one_sided",
    "hodges_lehmann",
    "ErrorDecomposition",
    "error_decomposition",
    "rate_shift",
    "loglog_slope",
    "mean_sem",
]

K_B_EV = 8.617333262e-5  # Boltzmann constant, eV/K
EXACT_MAX_N = 25


def _signed_rank_cdf_counts(n: int) -> np.ndarray:
    """Number of sign patterns giving each rank sum ``0..n(n+1)/2``."""
    top = n * (n + 1) // 2
    counts = np.zeros(top + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in range(1, n + 1):
        counts[r:] = counts[r:] + counts[:-r].copy()
    return counts


def wilcoxon_one_sided(paired_diffs: Sequence[float]) -> float:
    """One-sided signed-rank p-value for the alternative "differences are positive".

    ``paired_diffs`` are ``first - second``; a small p-value says the second
    variant is smaller. Zero differences are dropped and tied magnitudes get
    average ranks. The tail is exact for ``n <= 25`` (rank-sum distribution
    by dynamic programming; exact only without ties) and uses the normal
    approximation with continuity correction above that.
    """
    d = np.asarray(paired_diffs, dtype=float).ravel()
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return 1.0
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= EXACT_MAX_N:
        counts = _signed_rank_cdf_counts(n)
        # P(W+ >= observed); average ranks can be half-integers
        k = int(math.ceil(w_plus - 1e-9))
        return float(min(1.0, counts[k:].sum() / 2.0**n))
    mu = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts**3 - tie_counts)) / 48.0
    z = (w_plus - mu - 0.5) / math.sqrt(var)
    return float(norm.sf(z))


def _average_ranks(a: np.ndarray) -> np.ndarray:
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(a.size)
    sa = a[order]
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and sa[j + 1] == sa[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def hodges_lehmann(paired_diffs: Sequence[float]) -> float:
    """Median of the Walsh averages ``(d_i + d_j)/2`` over ``i <= j``."""
    d = np.asarray(paired_diffs, dtype=float).ravel()
    if d.size == 0:
        raise ValueError("need at least one difference")
    i, j = np.triu_indices(d.size)
    return float(np.median(0.5 * (d[i] + d[j])))


@dataclass(frozen=True)
class ErrorDecomposition:
    statistical: float
    optimization_bias: float
    model_bias: float
    rms_error: float

    @property
    def bound_holds(self) -> bool:
        total = self.statistical + self.optimization_bias + self.model_bias
        return self.rms_error <= total * (1.0 + 1e-12) + 1e-15


def error_decomposition(per_seed_barriers: Sequence[float], mean_target_barrier: float, ref_barrier: float) -> ErrorDecomposition:
    """Split barrier error into statistical spread, optimization bias and model bias.

    The statistical term is the sample standard deviation (ddof 1) of the
    per-seed barriers; it dominates the population spread, so the RMS error
    against the reference is at most the sum of the three terms.
    """
    b = np.asarray(per_seed_barriers, dtype=float).ravel()
    if b.size < 2:
        raise ValueError("need at least two seeds")
    stat = float(np.std(b, ddof=1))
    opt = abs(float(b.mean()) - mean_target_barrier)
    model = abs(mean_target_barrier - ref_barrier)
    rms = float(np.sqrt(np.mean((b - ref_barrier) ** 2)))
    return ErrorDecomposition(stat, opt, model, rms)


def rate_shift(delta_eV: float, T_kelvin: float) -> float:
    """Harmonic rate ratio ``exp(-delta / (k_B T))`` for a barrier shift ``delta``."""
    if T_kelvin <= 0:
        raise ValueError("temperature must be positive")
    return math.exp(-delta_eV / (K_B_EV * T_kelvin))


def loglog_slope(k: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of ``log(values)`` against ``log(k)``."""
    k = np.asarray(k, dtype=float)
    v = np.asarray(values, dtype=float)
    if k.shape != v.shape or k.size < 2 or np.any(k <= 0) or np.any(v <= 0):
        raise ValueError("need at least two positive (k, value) pairs")
    return float(np.polyfit(np.log(k), np.log(v), 1)[0])


def mean_sem(a, axis: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and standard error (sample std with ddof 1 over sqrt(n)) along ``axis``."""
    a = np.asarray(a, dtype=float)
    n = a.shape[axis]
    mean = a.mean(axis=axis)
    sem = a.std(axis=axis, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
    return mean, sem
