import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from sfdelab.stats import Z99, mann_kendall, mean_se, ols, tree_sum, upper_bound


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=300))
def test_tree_sum_close_to_fsum(vals):
    assert tree_sum(np.array(vals)) == pytest.approx(math.fsum(vals), abs=1e-6)


def test_tree_sum_shape_and_empty():
    x = np.arange(12.0).reshape(6, 2)
    assert tree_sum(x).tolist() == [30.0, 36.0]
    assert tree_sum(np.zeros((0, 3))).tolist() == [0.0, 0.0, 0.0]


def test_mean_se():
    m, se = mean_se(np.array([1.0, 2.0, 3.0, 4.0]))
    assert m == 2.5 and se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)
    assert upper_bound(np.array([1.0, 2.0, 3.0, 4.0])) == pytest.approx(m + Z99 * se)
    assert Z99 == pytest.approx(2.3263478740408408)


def test_mann_kendall_against_scipy_kendall():
    rng = np.random.default_rng(0)
    x = np.cumsum(rng.standard_normal(30)) + 0.3 * np.arange(30)
    mk = mann_kendall(x)
    tau = stats.kendalltau(np.arange(30), x)
    assert mk.S == pytest.approx(tau.statistic * 30 * 29 / 2)
    assert mk.increasing()


def test_mann_kendall_decreasing_and_flat():
    assert not mann_kendall(np.arange(20.0)[::-1]).increasing()
    assert mann_kendall(np.ones(10)).p_increasing == 1.0


def test_mann_kendall_ties():
    mk = mann_kendall([1, 1, 2, 2, 3])
    n = 5
    assert mk.var_S == pytest.approx((n * (n - 1) * (2 * n + 5) - 2 * (2 * 1 * 9)) / 18)


def test_ols():
    slope, icpt = ols([0, 1, 2, 3], [1, 3, 5, 7])
    assert slope == pytest.approx(2.0) and icpt == pytest.approx(1.0)
    assert math.isnan(ols([1, 1], [2, 3])[0])
