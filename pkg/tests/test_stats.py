import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats as sps

from wsiqc.errors import ZeroVariance
from wsiqc.stats import confusion_stats, plcc, rankdata, srcc


def oracle_pearson(x, y):
    # two-pass in extended precision, independent of the library routine
    x = np.asarray(x, dtype=np.longdouble)
    y = np.asarray(y, dtype=np.longdouble)
    dx, dy = x - x.mean(), y - y.mean()
    return float((dx * dy).sum() / np.sqrt((dx * dx).sum() * (dy * dy).sum()))


def test_against_scipy_on_1000_series_with_ties():
    rng = np.random.default_rng(7)
    for k in range(1000):
        n = int(rng.integers(3, 60))
        if k % 2:
            x = rng.integers(0, 6, n).astype(float)
            y = x + rng.integers(0, 4, n)
        else:
            x, y = rng.normal(size=n), rng.normal(size=n)
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            continue
        assert abs(plcc(x, y) - oracle_pearson(x, y)) < 1e-12
        assert abs(srcc(x, y) - sps.spearmanr(x, y).statistic) < 1e-12
        assert abs(plcc(x, y) - sps.pearsonr(x, y).statistic) < 1e-12


def test_ranks_average_ties():
    assert rankdata([10, 20, 20, 5]).tolist() == [2.0, 3.5, 3.5, 1.0]


def test_perfect_and_reversed():
    x = np.arange(10.0)
    assert srcc(x, x ** 3) == 1.0
    assert srcc(x, -x) == -1.0
    assert plcc(x, 2 * x + 1) == pytest.approx(1.0, abs=1e-15)


def test_zero_variance_and_bad_input():
    with pytest.raises(ZeroVariance):
        plcc([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        srcc([1], [2])
    with pytest.raises(ValueError):
        plcc([1, 2], [1, 2, 3])


def test_confusion():
    assert confusion_stats(8, 6, 2, 4) == (0.7, 8 / 12, 6 / 8)
    assert confusion_stats(0, 5, 0, 0) == (1.0, None, 1.0)


@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=30), st.data())
def test_srcc_invariant_under_monotone_maps(xs, data):
    x = np.array(xs)
    y = np.array(data.draw(st.lists(st.floats(-1e6, 1e6), min_size=len(xs), max_size=len(xs))))
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return
    r = srcc(x, y)
    assert -1.0 <= r <= 1.0
    assert srcc(np.argsort(np.argsort(x)) if np.unique(x).size == x.size else x, y) == pytest.approx(r, abs=1e-12)
    assert srcc(y, x) == pytest.approx(r, abs=1e-12)


def test_confusion_points():
    assert confusion_stats(10, 10, 0, 0) == (1.0, 1.0, 1.0)
    assert confusion_stats(0, 0, 5, 5) == (0.0, 0.0, 0.0)
    acc, sens, spec = confusion_stats(8, 5, 2, 5)
    assert acc == 0.65 and sens == pytest.approx(8 / 13) and spec == pytest.approx(5 / 7)


def test_rank_pearson_oracle_with_ties():
    x = [1, 2, 2, 3, 3, 3, 4]
    y = [2, 1, 2, 2, 5, 5, 9]

    def ranks(v):
        return [sum(u < a for u in v) + (sum(u == a for u in v) + 1) / 2 for a in v]

    assert srcc(x, y) == pytest.approx(oracle_pearson(ranks(x), ranks(y)), abs=1e-12)
