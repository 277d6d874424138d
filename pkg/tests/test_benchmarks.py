import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats as sps

from conftest import month_panel
from statefolio.benchmarks import (BenchmarkContext, BenchmarkKind, benchmark_predict, benchmark_table,
                                   martingale_accuracy, martingale_accuracy_from_matrix,
                                   monte_carlo_benchmark_study, no_information_accuracy, studentized_range_cdf,
                                   studentized_range_ppf, studentized_range_sf, tukey_hsd)
from statefolio.errors import ValidationError
from statefolio.panel import TimeSeriesSplit
from statefolio.synth import SynthSpec, generate_panel, persistence_transition

SKEWED = np.array([0.0998, 0.0991, 0.0995, 0.0998, 0.1001, 0.1000, 0.1016, 0.1001, 0.1000, 0.1000])


def test_oos_naive_predicts_modal_state():
    pred = benchmark_predict(BenchmarkKind.OOS_NAIVE, BenchmarkContext(oos_dist=SKEWED / SKEWED.sum()), 50)
    assert np.all(pred == 7)


def test_uniform_random_shares():
    pred = benchmark_predict(BenchmarkKind.UNIFORM_RANDOM, BenchmarkContext(), 1_000_000, seed=1)
    shares = np.bincount(pred, minlength=11)[1:] / len(pred)
    assert np.all(np.abs(shares - 0.1) < 0.002)


def test_distribution_random_follows_distribution():
    dist = np.array([0.5, 0.5] + [0.0] * 8)
    pred = benchmark_predict(BenchmarkKind.IS_DISTRIBUTION_RANDOM, BenchmarkContext(is_dist=dist), 20_000, seed=2)
    assert set(np.unique(pred)) == {1, 2}
    assert abs(np.mean(pred == 1) - 0.5) < 0.02


def test_martingale_repeats_prior_state():
    pred = benchmark_predict(BenchmarkKind.MARTINGALE, BenchmarkContext(prior_states=np.array([3, 0, 9])), 3)
    assert pred.tolist() == [3, 0, 9]
    with pytest.raises(ValidationError):
        benchmark_predict(BenchmarkKind.MARTINGALE, BenchmarkContext(), 3)


def test_missing_or_bad_distribution():
    with pytest.raises(ValidationError):
        benchmark_predict(BenchmarkKind.IS_NAIVE, BenchmarkContext(), 3)
    with pytest.raises(ValidationError):
        no_information_accuracy([0.5] * 10)


def test_no_information_examples():
    assert no_information_accuracy(np.full(10, 0.1)) == pytest.approx(0.1)
    assert no_information_accuracy(SKEWED / SKEWED.sum()) == pytest.approx(0.1016 / SKEWED.sum())


def test_martingale_from_matrix_examples():
    prev = np.full(10, 0.1)
    assert martingale_accuracy_from_matrix(np.eye(10), prev) == pytest.approx(1.0)
    assert martingale_accuracy_from_matrix(np.full((10, 10), 0.1), prev) == pytest.approx(0.1)
    with pytest.raises(ValidationError):
        martingale_accuracy_from_matrix(np.full((10, 10), 0.2), prev)


def test_martingale_accuracy_on_panel():
    # s0 keeps its state, s1 flips
    p = month_panel({199201: [0.0, 0.1], 199202: [0.0, -0.1]}, state=[1, 10, 1, 1])
    assert martingale_accuracy(p) == pytest.approx(0.5)


# -- Monte Carlo ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def persistent_panel():
    return generate_panel(SynthSpec(n_stocks=500, n_months=24, transition=persistence_transition(0.3),
                                    n_features=0, seed=8))


def test_monte_carlo_ordering(persistent_panel):
    split = TimeSeriesSplit((196301, 196312), (196401, 196412))
    res = monte_carlo_benchmark_study(persistent_panel, split, n_draw=2000, iters=300, seed=1)
    means = {k: s.mean for k, s in res.items()}
    assert abs(means[BenchmarkKind.UNIFORM_RANDOM] - 0.1) < 0.003
    # resampling reproduces the realized repeat share of the test rows, itself near the planted 0.3
    p = persistent_panel
    test = p.month >= 196401
    prior = p.prior_state()[test]
    realized = np.mean(prior[prior > 0] == p.state[test][prior > 0])
    assert abs(realized - 0.3) < 0.03
    assert means[BenchmarkKind.MARTINGALE] == pytest.approx(realized, abs=0.003)
    assert max(means, key=means.get) is BenchmarkKind.MARTINGALE
    # balanced states: the modal-state classifier is right about a tenth of the time
    assert abs(means[BenchmarkKind.OOS_NAIVE] - 0.1) < 0.003
    # distribution-random accuracy equals the collision probability of the shares
    oos = np.bincount(persistent_panel.state[persistent_panel.month >= 196401], minlength=11)[1:]
    oos = oos / oos.sum()
    assert means[BenchmarkKind.OOS_DISTRIBUTION_RANDOM] == pytest.approx(float(oos @ oos), abs=0.003)


def test_monte_carlo_is_deterministic(persistent_panel):
    split = TimeSeriesSplit((196301, 196312), (196401, 196412))
    a = monte_carlo_benchmark_study(persistent_panel, split, n_draw=100, iters=20, seed=3)
    b = monte_carlo_benchmark_study(persistent_panel, split, n_draw=100, iters=20, seed=3)
    for k in a:
        np.testing.assert_array_equal(a[k].draws, b[k].draws)


def test_monte_carlo_needs_labels():
    p = month_panel({199201: [0.0] * 10, 199202: [0.0] * 10})
    with pytest.raises(ValidationError):
        monte_carlo_benchmark_study(p, TimeSeriesSplit((199201, 199201), (199202, 199202)), 10, 5)


# -- studentized range and Tukey --------------------------------------------------------


@pytest.mark.parametrize("q,df", [(0.5, 5), (3.0, 10), (4.2, 60), (2.0, 1000)])
def test_two_group_range_is_scaled_t(q, df):
    # with two means Q = sqrt(2) |T|, T ~ t(df)
    want = 1.0 - 2.0 * sps.t.sf(q / np.sqrt(2.0), df)
    assert studentized_range_cdf(q, 2, df) == pytest.approx(want, abs=1e-9)


def test_studentized_range_matches_simulation():
    rng = np.random.default_rng(77)
    k, df, n = 6, 20, 200_000
    z = rng.standard_normal((n, k))
    s = np.sqrt(rng.chisquare(df, n) / df)
    q = np.ptp(z, axis=1) / s
    for x in (2.5, 4.0, 5.5):
        emp = np.mean(q <= x)
        assert studentized_range_cdf(x, k, df) == pytest.approx(emp, abs=4 * np.sqrt(emp * (1 - emp) / n) + 1e-4)


def test_studentized_range_ppf_inverts_cdf():
    q = studentized_range_ppf(0.95, 6, 200)
    assert studentized_range_cdf(q, 6, 200) == pytest.approx(0.95, abs=1e-9)
    assert studentized_range_sf(q, 6, 200) == pytest.approx(0.05, abs=1e-9)
    assert studentized_range_cdf(0.0, 6, 200) == 0.0
    with pytest.raises(ValidationError):
        studentized_range_cdf(1.0, 1, 10)
    with pytest.raises(ValidationError):
        studentized_range_ppf(1.0, 6, 10)


def test_tukey_matches_scipy(rng):
    groups = {str(i): rng.normal(i * 0.2, 1.0, 40 + 5 * i) for i in range(4)}
    ours = {(r.group_a, r.group_b): r for r in tukey_hsd(groups)}
    ref = sps.tukey_hsd(*groups.values())
    for (a, b), r in ours.items():
        i, j = int(a), int(b)
        # scipy reports mean(i) - mean(j)
        assert r.diff == pytest.approx(-ref.statistic[i, j], abs=1e-12)
        assert r.p_value == pytest.approx(ref.pvalue[i, j], abs=1e-6)
        ci = ref.confidence_interval(0.95)
        assert r.ci_lo == pytest.approx(-ci.high[i, j], abs=1e-6)
        assert r.ci_hi == pytest.approx(-ci.low[i, j], abs=1e-6)


def test_tukey_identical_groups():
    base = np.linspace(-1, 1, 30)
    recs = tukey_hsd({"a": base, "b": base.copy(), "c": base.copy()})
    assert all(r.diff == 0.0 and r.p_value == pytest.approx(1.0) for r in recs)


def test_tukey_large_shift_significant(rng):
    a = rng.normal(0, 1, 50)
    recs = tukey_hsd({"a": a, "b": a + 10.0})
    assert recs[0].p_value < 1e-6 and recs[0].ci_lo > 0


def test_tukey_zero_variance_rejected():
    with pytest.raises(ValidationError, match="variance"):
        tukey_hsd({"a": [1.0, 1.0], "b": [2.0, 2.0]})
    with pytest.raises(ValidationError):
        tukey_hsd({"a": [1.0, 2.0]})


@given(st.integers(0, 2 ** 31), st.permutations(range(3)))
def test_tukey_antisymmetric_and_order_free(seed, perm):
    rng = np.random.default_rng(seed)
    groups = {n: rng.normal(i, 1.0, 12) for i, n in enumerate("xyz")}
    base = {frozenset((r.group_a, r.group_b)): r for r in tukey_hsd(groups)}
    names = [list(groups)[i] for i in perm]
    for r in tukey_hsd({n: groups[n] for n in names}):
        ref = base[frozenset((r.group_a, r.group_b))]
        sign = 1.0 if ref.group_a == r.group_a else -1.0
        assert r.diff == pytest.approx(sign * ref.diff, abs=1e-12)
        assert r.p_value == pytest.approx(ref.p_value, abs=1e-12)


def test_benchmark_table_labels(persistent_panel):
    split = TimeSeriesSplit((196301, 196312), (196401, 196412))
    res = monte_carlo_benchmark_study(persistent_panel, split, n_draw=500, iters=40, seed=2)
    recs = benchmark_table(res)
    assert len(recs) == 15
    assert {r.group_a for r in recs} | {r.group_b for r in recs} == {str(i) for i in range(1, 7)}
    mart = [r for r in recs if r.group_b == "6"]
    assert all(r.diff > 0 and r.p_value < 0.01 for r in mart)
    assert not math.isnan(recs[0].ci_lo)
