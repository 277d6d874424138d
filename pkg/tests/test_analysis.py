import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st
from scipy import optimize

from statefolio.analysis import (APPEARANCE, category_summary, factor_regression, feature_importance,
                                 lifetime_regression, load_factors, model_certainty, model_confidence,
                                 monthly_aggregates, moving_average_correlation, ols, rolling_correlation,
                                 rolling_relation_table)
from statefolio.errors import RankDeficiencyError, ValidationError
from statefolio.learners import MlpSpec, PredictionSet, TreeSpec, train_mlp, train_tree_ensemble
from statefolio.panel import Panel
from statefolio.portfolio import PortfolioSeries


def test_certainty_and_confidence_examples():
    uniform = np.full(10, 0.1)
    assert model_certainty(uniform) == pytest.approx(0.0, abs=1e-18) and model_confidence(uniform) == 0.1
    hot = np.eye(10)[3]
    assert model_certainty(hot) == pytest.approx(0.09, abs=1e-15) and model_confidence(hot) == 1.0
    assert model_certainty([0.5, 0.5] + [0] * 8) == pytest.approx(0.04, abs=1e-15)


@given(st.lists(st.floats(0.0, 1.0), min_size=10, max_size=10).filter(lambda v: sum(v) > 0), st.randoms())
def test_certainty_bounds_and_symmetry(raw, rnd):
    p = np.array(raw) / sum(raw)
    q = p.copy()
    rnd.shuffle(q)
    assert model_certainty(p) == pytest.approx(model_certainty(q), abs=1e-15)
    assert model_certainty(p) <= 0.09 + 1e-12


# -- OLS ---------------------------------------------------------------------------------


def test_ols_exact_line():
    x = np.arange(10.0)
    r = ols(np.column_stack([np.ones(10), x]), 2 + 3 * x, ["const", "x"])
    np.testing.assert_allclose(r.coefficients, [2, 3], atol=1e-12)
    assert r.r_squared == pytest.approx(1.0) and r.coef("x") == pytest.approx(3.0)


def test_ols_simple_regression_by_hand(rng):
    x = rng.normal(size=40)
    y = 1.0 + 0.5 * x + rng.normal(size=40)
    r = ols(np.column_stack([np.ones(40), x]), y)
    xc = x - x.mean()
    b = float(xc @ (y - y.mean()) / (xc @ xc))
    resid = y - (y.mean() - b * x.mean()) - b * x
    se_b = math.sqrt(resid @ resid / 38 / (xc @ xc))
    assert r.coefficients[1] == pytest.approx(b, abs=1e-12)
    assert r.standard_errors[1] == pytest.approx(se_b, rel=1e-10)
    assert r.t_stats[1] == pytest.approx(b / se_b, rel=1e-10)


def test_ols_noise_has_no_fit(rng):
    n = 10_000
    r = ols(np.column_stack([np.ones(n), rng.normal(size=n)]), rng.normal(size=n))
    assert r.r_squared < 0.002


def test_ols_row_permutation_invariant(rng):
    X = np.column_stack([np.ones(30), rng.normal(size=(30, 2))])
    y = rng.normal(size=30)
    perm = rng.permutation(30)
    a, b = ols(X, y), ols(X[perm], y[perm])
    for f in ("coefficients", "standard_errors", "p_values"):
        np.testing.assert_allclose(getattr(a, f), getattr(b, f), rtol=1e-10)


@given(st.integers(0, 2 ** 31), st.integers(3, 40))
def test_ols_residuals_orthogonal(seed, n):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
    r = ols(X, rng.normal(size=n) * 5)
    assert np.max(np.abs(X.T @ r.residuals)) < 1e-8


def test_ols_rank_deficient():
    x = np.arange(5.0)
    with pytest.raises(RankDeficiencyError):
        ols(np.column_stack([np.ones(5), x, 2 * x]), x)
    with pytest.raises(ValidationError):
        ols(np.ones((2, 3)), [1.0, 2.0])


# -- factor regressions ------------------------------------------------------------------


def _factors(rng, months):
    return pd.DataFrame({"mkt_rf": rng.normal(0.006, 0.04, len(months)), "smb": rng.normal(0, 0.03, len(months)),
                         "hml": rng.normal(0, 0.03, len(months)), "mom": rng.normal(0, 0.04, len(months))},
                        index=pd.Index(months, name="yyyymm"))


MONTHS = [199001 + 100 * (i // 12) + i % 12 for i in range(120)]


def test_factor_regression_exact(rng):
    f = _factors(rng, MONTHS)
    s = PortfolioSeries(np.array(MONTHS), 0.01 + f["mkt_rf"].to_numpy())
    r = factor_regression(s, f)
    assert r.coef("const") == pytest.approx(0.01, abs=1e-12) and r.coef("mkt_rf") == pytest.approx(1.0, abs=1e-10)
    assert r.r_squared == pytest.approx(1.0, abs=1e-10)
    itself = factor_regression(PortfolioSeries(np.array(MONTHS), f["smb"].to_numpy()), f)
    assert itself.coef("const") == pytest.approx(0.0, abs=1e-12)


def test_factor_regression_linear_combination(rng):
    f = _factors(rng, MONTHS)
    s = PortfolioSeries(np.array(MONTHS), (0.3 * f["mkt_rf"] - 0.7 * f["hml"] + 0.2 * f["mom"]).to_numpy())
    assert factor_regression(s, f, "FF3F+MOM").r_squared == pytest.approx(1.0, abs=1e-10)


def test_factor_regression_planted_alpha(rng):
    f = _factors(rng, MONTHS)
    y = 0.02 + 1.1 * f["mkt_rf"].to_numpy() + 0.4 * f["smb"].to_numpy() + rng.normal(0, 0.01, 120)
    r = factor_regression(PortfolioSeries(np.array(MONTHS), y), f)
    assert abs(r.coef("const") - 0.02) < 2 * r.standard_errors[0]


def test_factor_regression_errors(rng, tmp_path):
    f = _factors(rng, MONTHS[:60])
    with pytest.raises(ValidationError, match="missing"):
        factor_regression(PortfolioSeries(np.array(MONTHS), np.zeros(120)), f)
    with pytest.raises(ValidationError, match="lacks"):
        factor_regression(PortfolioSeries(np.array(MONTHS[:60]), np.zeros(60)), f, "q4")
    with pytest.raises(ValidationError):
        factor_regression(PortfolioSeries(np.array(MONTHS[:60]), np.zeros(60)), f, "FF9")
    path = tmp_path / "f.csv"
    path.write_text("yyyymm,Mkt-RF,SMB,HML\n199001,0.01,0.0,0.0\n199002,0.02,0.01,0.0\n")
    assert list(load_factors(path).columns) == ["mkt_rf", "smb", "hml"]


# -- rolling relations ---------------------------------------------------------------------


def test_rolling_correlation_examples(rng):
    a = rng.normal(size=30)
    np.testing.assert_allclose(rolling_correlation(a, 2 * a + 1, 5), 1.0)
    np.testing.assert_allclose(rolling_correlation(a, -a, 5), -1.0)
    b = rng.normal(size=30)
    full = rolling_correlation(a, b, 30)
    assert len(full) == 1 and full[0] == pytest.approx(np.corrcoef(a, b)[0, 1], abs=1e-12)
    assert np.isnan(rolling_correlation(np.ones(5), a[:5], 3)).all()
    with pytest.raises(ValidationError):
        rolling_correlation(a, b, 31)


def test_moving_average_correlation(rng):
    a, b = rng.normal(size=50), rng.normal(size=50)
    assert moving_average_correlation(a, b, 1) == pytest.approx(np.corrcoef(a, b)[0, 1], abs=1e-12)
    sa = np.convolve(a, np.ones(6) / 6, "valid")
    sb = np.convolve(b, np.ones(6) / 6, "valid")
    assert moving_average_correlation(a, b, 6) == pytest.approx(np.corrcoef(sa, sb)[0, 1], abs=1e-12)
    with pytest.raises(ValidationError):
        moving_average_correlation(a, b, 50)


def _lifetime_panel(seed, n_stocks=300, n_months=24, drop_some=False):
    rng = np.random.default_rng(seed)
    skill = rng.normal(size=n_stocks)  # persistent characteristic that drives accuracy
    sid, mon, feat, state, probs = [], [], [], [], []
    for t in range(n_months):
        m = 199001 + 100 * (t // 12) + t % 12
        for i in range(n_stocks):
            if drop_some and i % 3 == 0 and t % 4 == 0:
                continue
            s = int(rng.integers(1, 11))
            hit = rng.random() < 1 / (1 + math.exp(-skill[i]))
            guess = s if hit else 1 + (s % 10)
            sid.append(f"s{i:03d}")
            mon.append(m)
            feat.append([skill[i] + 0.1 * rng.normal(), rng.normal()])
            state.append(s)
            p = np.full(10, 0.05)
            p[guess - 1] = 0.55
            probs.append(p)
    panel = Panel(sid, mon, rng.normal(0, 0.05, len(sid)), None, np.array(feat), ["skill", "noise"], state)
    return panel, PredictionSet(sid, mon, np.array(probs), np.array(state))


def test_lifetime_planted_signal():
    panel, preds = _lifetime_panel(1)
    res = lifetime_regression(panel, preds)
    rec = res.records().set_index("variable")
    assert rec.loc["skill", "coefficient"] > 0 and rec.loc["skill", "p_value"] < 1e-6
    assert rec.loc["noise", "p_value"] > 0.01
    # balanced panel: every stock appears equally often, so the count column carries nothing
    assert APPEARANCE in res.excluded and res.n_stocks == 300


def test_lifetime_appearance_kept_when_it_varies():
    panel, preds = _lifetime_panel(2, drop_some=True)
    res = lifetime_regression(panel, preds, "certainty")
    assert APPEARANCE in res.ols.names and not res.excluded


def test_lifetime_constant_feature_excluded():
    panel, preds = _lifetime_panel(3, n_stocks=40, n_months=6)
    f = panel.features.copy()
    f[:, 1] = 7.0
    res = lifetime_regression(panel.with_features(f), preds)
    assert "noise" in res.excluded and "noise" not in res.ols.names


def test_monthly_aggregates_and_relation_table():
    panel, preds = _lifetime_panel(4, n_stocks=30, n_months=24)
    agg = monthly_aggregates(preds, panel)
    assert len(agg) == 24 and np.allclose(agg["confidence"], 0.55)
    table = rolling_relation_table(agg, windows=(1, 6, 30))
    assert table["window"].tolist() == [1, 6]


# -- category aggregation -------------------------------------------------------------------


def test_category_summary_examples():
    records = pd.DataFrame({"variable": ["const", "a", "b", "c"], "coefficient": [9.0, 0.2, -0.1, 0.05],
                            "p_value": [0.0, 0.01, 0.5, 0.09]})
    cats = {"a": "X", "b": "X", "c": "Y"}
    out = {c.category: c for c in category_summary(records, cats)}
    assert out["X"].sum_significant == pytest.approx(0.2) and out["X"].n_significant == 1 and out["X"].n_total == 2
    assert out["Y"].n_significant == 1
    none = category_summary(records, cats, alpha=0.001)
    assert all(c.sum_significant == 0 and c.n_significant == 0 for c in none)
    everything = category_summary(records, cats, alpha=1.0)
    assert sum(c.sum_significant for c in everything) == pytest.approx(0.15)
    with pytest.raises(ValidationError):
        category_summary(records, {"a": "X"})


# -- importance -------------------------------------------------------------------------------


def _binary_entropy(p):
    return -(p * math.log2(p) + (1 - p) * math.log2(1 - p))


def test_importance_zero_for_unused_and_one_for_perfect(rng):
    n = 2000
    y = rng.integers(1, 11, n)
    X = np.column_stack([y + 0.0, np.zeros(n), rng.normal(size=n)])
    panel = Panel([f"s{i}" for i in range(n)], [199001] * n, np.zeros(n), None, X, ["exact", "flat", "noise"], y)
    imp = feature_importance(train_tree_ensemble(TreeSpec(max_depth=1, n_trees=3), panel)).set_index("feature")
    assert imp.loc["flat", "score"] == 0.0
    assert imp.loc["exact", "relative"] == 1.0 and imp.loc["exact", "rank"] == 1
    assert imp["score"].min() >= 0


def test_importance_ratio_follows_planted_information():
    # P(high half of states | x1, x2) = 0.5 + a*s1 + b*s2 with s = +-1; within a half states are uniform,
    # so a stump on x_k removes 1 - h(0.5 + a_k) bits per row; b is solved so that ratio is exactly 3
    a = 0.26
    b = optimize.brentq(lambda b: (1 - _binary_entropy(0.5 + a)) - 3 * (1 - _binary_entropy(0.5 + b)), 1e-4, a)
    rng = np.random.default_rng(21)
    n = 40_000
    x1, x2 = rng.integers(0, 2, n), rng.integers(0, 2, n)
    high = rng.random(n) < 0.5 + a * (2 * x1 - 1) + b * (2 * x2 - 1)
    y = 1 + rng.integers(0, 5, n) + 5 * high
    panel = Panel([f"s{i}" for i in range(n)], [199001] * n, np.zeros(n), None,
                  np.column_stack([x1, x2]).astype(float), ["x1", "x2"], y)
    # one-feature stumps: each tree sees a random single column
    model = train_tree_ensemble(TreeSpec(kind="RF", max_depth=1, n_trees=600, col_sample_rate=0.5, seed=3), panel)
    imp = feature_importance(model).set_index("feature")
    ratio = imp.loc["x1", "score"] / imp.loc["x2", "score"]
    assert abs(ratio - 3.0) < 0.6
    assert imp["score"].sum() == pytest.approx(float(model.gain[model.feat >= 0].sum()))
    assert imp["percent"].sum() == pytest.approx(100.0)


def test_importance_refuses_networks(small_synth):
    model = train_mlp(MlpSpec(hidden_sizes=(4,), epochs=1), small_synth.take(np.arange(200)))
    with pytest.raises(ValidationError):
        feature_importance(model)
