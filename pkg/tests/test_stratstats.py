import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import chi2

from _oracles import brute_h
from fusestrata.stratstats import (bh_fdr, bootstrap_kw, cluster_factor_stats, cluster_profiles, kruskal_wallis,
                                   midpoint_quantile, midranks, replicate_draws)


def test_kw_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(4, 13))
        k = int(rng.integers(2, 4))
        groups = list(range(k)) + rng.integers(0, k, n - k).tolist()
        values = rng.integers(0, 5, n).astype(float)  # plenty of ties
        h, df, p = kruskal_wallis(values, groups)
        want = brute_h(values.tolist(), groups)
        assert h == pytest.approx(want, rel=1e-10, abs=1e-12)
        assert df == k - 1
        assert p == pytest.approx(chi2.sf(want, k - 1), rel=1e-9, abs=1e-15)


def test_kw_all_tied():
    assert kruskal_wallis([2.0] * 6, [0, 0, 1, 1, 2, 2]) == (0.0, 2, 1.0)


def test_kw_needs_two_groups():
    with pytest.raises(ValueError):
        kruskal_wallis([1.0, 2.0], [0, 0])


@given(st.lists(st.integers(-100, 100), min_size=6, max_size=20), st.integers(0, 1000))
def test_kw_invariant_under_increasing_maps(values, seed):
    groups = np.random.default_rng(seed).integers(0, 3, len(values))
    groups[:3] = [0, 1, 2]
    v = np.array(values)
    h1 = kruskal_wallis(v, groups)[0]
    h2 = kruskal_wallis(v ** 3 + 7 * v - 2, groups)[0]
    assert h2 == pytest.approx(h1, rel=1e-9, abs=1e-12)


def test_midranks_hand_values():
    assert midranks([10, 20, 20, 5]).tolist() == [2.0, 3.5, 3.5, 1.0]


def test_bh_hand_values():
    q, rej = bh_fdr([0.01, 0.04, 0.03, 0.005], alpha=0.05)
    np.testing.assert_allclose(q, [0.02, 0.04, 0.04, 0.02])
    assert rej.all()
    q, rej = bh_fdr([0.02, 0.5, 0.04], alpha=0.05)
    np.testing.assert_allclose(q, [0.06, 0.5, 0.06])
    assert not rej.any()


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.sampled_from([0.01, 0.05, 0.2]))
def test_bh_sits_between_bonferroni_and_raw(p, alpha):
    p = np.array(p)
    q, rej = bh_fdr(p, alpha)
    assert np.all(q >= p - 1e-15) and np.all(q <= 1)
    order = np.argsort(p, kind="stable")
    assert np.all(np.diff(q[order]) >= -1e-15)
    assert np.all(rej[p <= alpha / len(p)])
    assert not np.any(rej[p > alpha])
    np.testing.assert_array_equal(rej, q <= alpha)


def test_bh_rejects_invalid():
    with pytest.raises(ValueError):
        bh_fdr([0.1, 1.2])


def exact_permutation_p(values, sizes):
    """Share of all splits into the given group sizes with H strictly above the observed one."""
    n = len(values)
    labels = np.repeat(np.arange(len(sizes)), sizes)
    h0 = brute_h(list(values), labels.tolist())
    above = total = 0
    for first in itertools.combinations(range(n), sizes[0]):
        g = np.ones(n, dtype=int)
        g[list(first)] = 0
        total += 1
        above += brute_h(list(values), g.tolist()) > h0 + 1e-12
    return above / total


@pytest.mark.parametrize("impl", ["numba", "numpy"])
def test_surrogate_p_converges_to_exact_permutation_p(impl):
    values = np.array([0.3, 1.2, 0.8, 2.5, 1.9, 0.1, 2.2, 1.1, 3.0, 0.7])
    labels = np.repeat([0, 1], 5)
    exact = exact_permutation_p(values, [5, 5])
    m = 4000
    res = bootstrap_kw(values, labels, n_boot=m, seed=1, impl=impl)
    se = math.sqrt(exact * (1 - exact) / m)
    assert abs(res.p_surrogate[0] - exact) < 4 * se
    assert res.p_smoothed[0] == pytest.approx((res.p_surrogate[0] * m + 1) / (m + 1))


def test_numba_and_numpy_nulls_agree():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((30, 3))
    labels = rng.integers(0, 3, 30)
    a = bootstrap_kw(x, labels, 500, seed=4, impl="numba")
    b = bootstrap_kw(x, labels, 500, seed=4, impl="numpy")
    np.testing.assert_allclose(a.null, b.null, rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(a.p_surrogate, b.p_surrogate)


def test_degenerate_factor_flagged():
    x = np.column_stack([np.ones(12), np.arange(12.0)])
    res = bootstrap_kw(x, np.repeat([0, 1, 2], 4), 200, seed=0)
    assert res.degenerate.tolist() == [True, False]
    assert res.p_surrogate[0] == 0.0


def test_perfect_separation_never_exceeded():
    x = np.arange(30.0)
    res = bootstrap_kw(x, np.repeat([0, 1, 2], 10), 2000, seed=0)
    assert res.p_surrogate[0] == 0.0
    assert res.p_smoothed[0] == 1 / 2001


def test_replacement_mode_and_draw_streams():
    x = np.random.default_rng(3).standard_normal(20)
    res = bootstrap_kw(x, np.repeat([0, 1], 10), 200, seed=5, replacement=True)
    assert res.mode == "replacement"
    assert np.all(res.null >= 0)
    perm = replicate_draws(5, 20, 3)
    assert all(sorted(row) == list(range(20)) for row in perm.tolist())
    np.testing.assert_array_equal(perm, replicate_draws(5, 20, 3))


def test_few_replicates_warn():
    with pytest.warns(UserWarning, match="coarse"):
        bootstrap_kw(np.arange(8.0), [0, 1] * 4, n_boot=50)


def test_cluster_factor_stats_rows():
    rng = np.random.default_rng(8)
    labels = np.repeat([0, 1, 2], 15)
    x = np.column_stack([labels + 0.3 * rng.standard_normal(45), rng.standard_normal(45)])
    rep = cluster_factor_stats(x, labels, ["F1", "F2"], n_boot=500, seed=1)
    rows = rep.rows()
    assert [r["factor"] for r in rows] == ["F1", "F2"]
    assert rows[0]["significant"] and rows[0]["significant_surrogate"]
    assert rows[0]["df"] == 2


def test_midpoint_quantile_hand_values():
    pop = [1.0, 2.0, 3.0, 4.0]
    assert midpoint_quantile(pop, 2.5) == 0.5
    assert midpoint_quantile(pop, 2.0) == 0.375
    assert midpoint_quantile(pop, 4.0) == 7 / 8
    assert midpoint_quantile(pop, 0.0) == 0.0


def test_cluster_profiles():
    scores = np.array([[1.0], [2.0], [3.0], [10.0], [11.0], [12.0]])
    prof = cluster_profiles(scores, [0, 0, 0, 1, 1, 1], ["F1"])
    np.testing.assert_allclose(prof.medians, [[2.0, 11.0]])
    np.testing.assert_allclose(prof.quantiles, [[3 / 12, 9 / 12]])
    np.testing.assert_allclose(prof.log_quantiles, np.log10([[0.25, 0.75]]))
    assert prof.clusters == [0, 1]
