import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from saddlekit.bench.stats import (
    error_decomposition,
    hodges_lehmann,
    loglog_slope,
    mean_sem,
    rate_shift,
    wilcoxon_one_sided,
)


def enumerate_wilcoxon(d):
    """Tail probability of W+ by brute-force enumeration of all sign patterns."""
    d = np.asarray(d, dtype=float)
    d = d[d != 0]
    ranks = sps.rankdata(np.abs(d))
    w_obs = ranks[d > 0].sum()
    hits = 0
    for signs in itertools.product((0, 1), repeat=d.size):
        if ranks[np.array(signs, dtype=bool)].sum() >= w_obs - 1e-9:
            hits += 1
    return hits / 2**d.size


# --- Wilcoxon -----------------------------------------------------------------


def test_wilcoxon_examples():
    assert wilcoxon_one_sided([1.0, 2.0, 3.0]) == pytest.approx(0.125, abs=0)
    assert wilcoxon_one_sided(np.arange(1, 25) * 0.1) == pytest.approx(2.0**-24, rel=1e-12)
    assert wilcoxon_one_sided([1, -1, 2, -2, 3, -3]) >= 0.5
    assert wilcoxon_one_sided([0.0, 0.0]) == 1.0
    assert wilcoxon_one_sided([]) == 1.0


@pytest.mark.parametrize("n", range(1, 11))
def test_wilcoxon_exact_matches_enumeration(n):
    rng = np.random.default_rng(n)
    for _ in range(20):
        d = rng.normal(0.3, 1.0, n)
        assert wilcoxon_one_sided(d) == pytest.approx(enumerate_wilcoxon(d), abs=1e-15)


def test_wilcoxon_matches_scipy_exact():
    rng = np.random.default_rng(11)
    for n in (5, 12, 20, 25):
        d = rng.normal(0.2, 1.0, n)
        ref = sps.wilcoxon(d, alternative="greater", method="exact").pvalue
        assert wilcoxon_one_sided(d) == pytest.approx(ref, rel=1e-10)


def test_wilcoxon_normal_branch_near_exact():
    # n = 26 uses the normal approximation; compare with the exact tail
    rng = np.random.default_rng(12)
    for _ in range(5):
        d = rng.normal(0.2, 1.0, 26)
        ref = sps.wilcoxon(d, alternative="greater", method="exact").pvalue
        assert abs(wilcoxon_one_sided(d) - ref) < 0.01


def test_wilcoxon_drops_zeros():
    assert wilcoxon_one_sided([0.0, 1.0, 2.0, 3.0]) == wilcoxon_one_sided([1.0, 2.0, 3.0])


# --- Hodges-Lehmann -------------------------------------------------------------


def test_hodges_lehmann_examples():
    assert hodges_lehmann([1.0, 2.0, 9.0]) == 3.5
    assert hodges_lehmann([0.7]) == 0.7
    assert hodges_lehmann([2.5] * 7) == 2.5
    with pytest.raises(ValueError):
        hodges_lehmann([])


@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=30))
@settings(max_examples=100, deadline=None)
def test_hodges_lehmann_matches_brute_force(d):
    walsh = sorted((d[i] + d[j]) / 2 for i in range(len(d)) for j in range(i, len(d)))
    m = len(walsh)
    ref = walsh[m // 2] if m % 2 else (walsh[m // 2 - 1] + walsh[m // 2]) / 2
    assert hodges_lehmann(d) == pytest.approx(ref, rel=1e-12, abs=1e-12)


# --- error decomposition --------------------------------------------------------


def test_error_decomposition_examples():
    e = error_decomposition([2.0, 2.0], 2.0, 2.0)
    assert (e.statistical, e.optimization_bias, e.model_bias) == (0.0, 0.0, 0.0)
    e = error_decomposition([1.0, 3.0], 2.0, 2.0)
    assert e.statistical == pytest.approx(math.sqrt(2.0))
    assert e.optimization_bias == 0.0 and e.model_bias == 0.0
    with pytest.raises(ValueError):
        error_decomposition([1.0], 1.0, 1.0)


def test_error_decomposition_bound_random():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        b = rng.normal(rng.normal(), rng.exponential(), n)
        e = error_decomposition(b, rng.normal(), rng.normal())
        assert e.bound_holds


# --- rates and slopes -----------------------------------------------------------


def test_rate_shift_examples():
    assert rate_shift(-0.010, 600.0) == pytest.approx(1.2134, abs=5e-4)
    assert rate_shift(-0.010, 300.0) == pytest.approx(1.4723, abs=5e-4)
    assert rate_shift(0.0, 300.0) == 1.0
    with pytest.raises(ValueError):
        rate_shift(0.01, 0.0)


def test_loglog_slope_exact_power_law():
    k = np.arange(5, 41)
    assert loglog_slope(k, 3.7 / k) == pytest.approx(-1.0, abs=1e-6)
    assert loglog_slope(k, 0.2 * k**-1.5) == pytest.approx(-1.5, abs=1e-10)
    with pytest.raises(ValueError):
        loglog_slope([1.0], [1.0])
    with pytest.raises(ValueError):
        loglog_slope([1.0, 2.0], [1.0, -1.0])


def test_mean_sem():
    m, s = mean_sem(np.array([[1.0, 2.0], [3.0, 6.0]]))
    np.testing.assert_allclose(m, [2.0, 4.0])
    np.testing.assert_allclose(s, [1.0, 2.0])
    m, s = mean_sem(np.array([[5.0, 1.0]]))
    np.testing.assert_array_equal(s, [0.0, 0.0])
