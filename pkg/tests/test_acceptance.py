"""End-to-end acceptance checks; each appends one summary line printed after the run."""
import math
import time
import warnings
from decimal import Decimal
from fractions import Fraction

import numpy as np
import pytest
import yaml

from conftest import ACCEPTANCE_LINES
from oracles import binary_cells, binomial_upper_tail_exact, dec_stats, kappa_by_hand, metrics_by_hand
from statefolio.analysis import category_summary
from statefolio.benchmarks import (BenchmarkKind, benchmark_table, martingale_accuracy_from_matrix,
                                   monte_carlo_benchmark_study, no_information_accuracy)
from statefolio.cli import main
from statefolio.errors import EmptyLegWarning
from statefolio.learners import PredictionSet, fit, predict_proba, spec_from_name
from statefolio.learners.base import softmax
from statefolio.learners.mlp import gradients, init_params, objective
from statefolio.panel import TimeSeriesSplit, normalize_features, split_sample
from statefolio.portfolio import (MaxProb, ProbabilityAdjusted, buy_hold, ceq, cumulative_return, form_portfolio,
                                  long_short_sharpe, max_drawdown, sharpe, turnover)
from statefolio.stats import binomial_test, class_metrics, confusion, kappa
from statefolio.synth import EMPIRICAL_TRANSITION, SynthSpec, empirical_transition, generate_panel
from statefolio.transition import transition_matrix


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def test_criterion_01_martingale_from_matrix():
    t = time.perf_counter()
    acc = martingale_accuracy_from_matrix(EMPIRICAL_TRANSITION, np.full(10, 0.1))
    dt = time.perf_counter() - t
    record(1, abs(acc - 0.1169) <= 0.0005 and round(acc, 3) == 0.117 and dt < 1,
           f"martingale accuracy {acc:.5f} (target 0.1169 +- 0.0005), {dt:.3f}s")


def test_criterion_02_no_information():
    t = time.perf_counter()
    dist = np.array([0.1016] + [(1 - 0.1016) / 9] * 9)
    acc = no_information_accuracy(dist)
    dt = time.perf_counter() - t
    record(2, abs(acc - 0.1016) < 1e-12 and round(acc, 3) == 0.102 and dt < 1,
           f"no-information accuracy {acc:.4f}, {dt:.3f}s")


def test_criterion_03_benchmark_ordering():
    t = time.perf_counter()
    panel = generate_panel(SynthSpec(n_stocks=1001, n_months=60, n_features=0, seed=5))
    res = monte_carlo_benchmark_study(panel, TimeSeriesSplit((196301, 196412), (196501, 196712)),
                                      n_draw=4886, iters=10_000, seed=1)
    recs = benchmark_table(res)
    dt = time.perf_counter() - t
    means = {k: s.mean for k, s in res.items()}
    mart = means[BenchmarkKind.MARTINGALE]
    top = all(mart > v for k, v in means.items() if k is not BenchmarkKind.MARTINGALE)
    naive = means[BenchmarkKind.OOS_NAIVE] >= means[BenchmarkKind.UNIFORM_RANDOM]
    pvals = [r.p_value for r in recs if "6" in (r.group_a, r.group_b)]
    ok = top and naive and max(pvals) < 0.01 and dt < 60
    record(3, ok, f"martingale {mart:.4f} vs others <= {max(v for k, v in means.items() if k is not BenchmarkKind.MARTINGALE):.4f}, "
                  f"oos_naive {means[BenchmarkKind.OOS_NAIVE]:.4f} >= uniform {means[BenchmarkKind.UNIFORM_RANDOM]:.4f}, "
                  f"max Tukey p {max(pvals):.1e}, {dt:.1f}s")


def test_criterion_04_predictability_recovery():
    t = time.perf_counter()
    panel = normalize_features(generate_panel(SynthSpec(n_stocks=5000, n_months=240, signal_fidelity=0.3, seed=1)))
    train, test = split_sample(panel, TimeSeriesSplit((196301, 197212), (197301, 198212)))
    p0 = no_information_accuracy(test.state_distribution())
    bh = buy_hold(test).returns.mean()
    acc, pval, ls_mean = {}, {}, {}
    for name in ("gbm8_50", "gbm2_50", "mlp2_32"):
        preds = predict_proba(fit(spec_from_name(name, seed=1), train), test)
        hits = int(np.sum(preds.argmax_state == preds.truth))
        r = binomial_test(hits, len(preds), p0)
        acc[name], pval[name] = r.accuracy, r.p_value
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyLegWarning)
            ls_mean[name] = form_portfolio(preds, test).long_short.returns.mean()
    dt = time.perf_counter() - t
    ok = (all(pval[m] < 0.01 and ls_mean[m] > bh for m in ("gbm8_50", "mlp2_32"))
          and acc["gbm2_50"] < acc["gbm8_50"] and dt < 600)
    record(4, ok, f"acc gbm8 {acc['gbm8_50']:.4f} gbm2 {acc['gbm2_50']:.4f} mlp2_32 {acc['mlp2_32']:.4f} "
                  f"vs no-info {p0:.4f}; LS means {ls_mean['gbm8_50']:.4f}/{ls_mean['mlp2_32']:.4f} "
                  f"vs buy-hold {bh:.4f}; {dt:.0f}s")


def test_criterion_05_null_calibration():
    t = time.perf_counter()
    significant = 0
    for seed in range(20):
        panel = normalize_features(generate_panel(SynthSpec(n_stocks=1000, n_months=48, signal_fidelity=0.0,
                                                            seed=200 + seed)))
        train, test = split_sample(panel, TimeSeriesSplit((196301, 196412), (196501, 196612)))
        preds = predict_proba(fit(spec_from_name("gbm4_20", seed=seed), train), test)
        hits = int(np.sum(preds.argmax_state == preds.truth))
        significant += binomial_test(hits, len(preds), no_information_accuracy(test.state_distribution())).p_value < 0.01
    dt = time.perf_counter() - t
    record(5, significant <= 1 and dt < 600, f"{significant} of 20 null runs significant at 1%, {dt:.0f}s")


def test_criterion_06_metric_oracles():
    t = time.perf_counter()
    rng = np.random.default_rng(606)
    worst = 0.0
    exact = True
    for _ in range(1000):
        n = int(rng.integers(1, 80))
        truth, pred = rng.integers(1, 11, n), rng.integers(1, 11, n)
        m = confusion(truth, pred)
        cls = int(rng.integers(1, 11))
        cells = binary_cells(truth, pred, cls)
        a = int(m.counts[cls - 1, cls - 1])
        exact &= (a, int(m.counts[cls - 1].sum()) - a, int(m.counts[:, cls - 1].sum()) - a) == cells[:3]
        got = class_metrics(m, cls).as_dict()
        for key, want in metrics_by_hand(*cells).items():
            if want is None:
                exact &= math.isnan(got[key])
            else:
                worst = max(worst, abs(got[key] - want))
        kw = kappa_by_hand(truth.tolist(), pred.tolist())
        if kw is None:
            exact &= math.isnan(kappa(m))
        else:
            worst = max(worst, abs(kappa(m) - kw))
        s = int(np.sum(truth == pred))
        p0 = float(rng.uniform(0.02, 0.5))
        worst = max(worst, abs(binomial_test(s, n, p0).p_value - float(binomial_upper_tail_exact(s, n, p0))))
    dt = time.perf_counter() - t
    record(6, exact and worst <= 1e-12 and dt < 30, f"max abs deviation {worst:.1e} over 1000 instances, {dt:.1f}s")


def test_criterion_07_gradient_check():
    t = time.perf_counter()
    worst = 0.0
    h = 1e-4
    for seed in range(20):
        rng = np.random.default_rng(700 + seed)
        sizes = [int(rng.integers(2, 6)), *rng.integers(1, 9, size=int(rng.integers(1, 4))).tolist(), 10]
        params = init_params(sizes, rng)
        X = rng.normal(size=(int(rng.integers(3, 12)), sizes[0]))
        y = rng.integers(0, 10, len(X))
        l1 = float(rng.choice([0.0, 1e-3]))
        grads = gradients(params, X, y, l1)
        for li, (W, b) in enumerate(params):
            for arr, g in ((W, grads[li][0]), (b, grads[li][1])):
                for idx in np.ndindex(arr.shape):
                    old = arr[idx]
                    if l1 and arr is W and abs(old) < 4 * h:
                        continue  # the L1 kink at 0 has no derivative
                    f = []
                    for step in (2 * h, h, -h, -2 * h):
                        arr[idx] = old + step
                        f.append(objective(params, X, y, l1))
                    arr[idx] = old
                    num = (-f[0] + 8 * f[1] - 8 * f[2] + f[3]) / (12 * h)
                    worst = max(worst, abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-6))
    dt = time.perf_counter() - t
    record(7, worst < 1e-4 and dt < 30, f"max relative error {worst:.1e} over 20 configurations, {dt:.1f}s")


def test_criterion_08_transition_recovery():
    t = time.perf_counter()
    planted = empirical_transition()
    tm = transition_matrix(generate_panel(SynthSpec(n_stocks=5000, n_months=120, transition=planted,
                                                    n_features=0, seed=8)))
    err = float(np.max(np.abs(tm.values - planted)))
    rows = float(np.max(np.abs(tm.values.sum(axis=1) - 1.0)))
    dt = time.perf_counter() - t
    record(8, err < 0.01 and rows <= 1e-9 and dt < 30,
           f"max cell error {err:.4f}, max row-sum error {rows:.1e}, {dt:.1f}s")


def test_criterion_09_portfolio_math():
    t = time.perf_counter()
    long = [0.02, -0.01, 0.03]
    short = [0.01, 0.02, -0.01]
    ls = [a - b for a, b in zip(long, short)]
    mu, sd, var = dec_stats(long)
    mu_ls, sd_ls, _ = dec_stats(ls)
    wealth = Decimal(1)
    for r in long:
        wealth *= 1 + Decimal(repr(r))
    # oracle values, frozen alongside the decimal recomputation
    want = {"sr": (0.7844645405527362, float(mu / sd)), "ls_sr": (0.23249527748763857, float(mu_ls / sd_ls)),
            "ceq": (0.013188888888888889, float(mu - var / 2)), "cum": (0.040094, float(wealth - 1)),
            "mdd": (0.01, 0.01)}
    got = {"sr": sharpe(long), "ls_sr": long_short_sharpe(long, short), "ceq": ceq(long, 1.0),
           "cum": cumulative_return(long), "mdd": max_drawdown(long)}
    worst = max(max(abs(got[k] - a), abs(got[k] - b)) for k, (a, b) in want.items())
    half = {"a": 0.5, "b": 0.5}
    drift = turnover([half, half], [{"a": 1.0, "b": 0.0}, {"a": 0.0, "b": 0.0}])
    three = turnover([half, half, {"a": 1.0}], [{"a": 1.0, "b": 0.0}, {"a": 0.0, "b": 0.0}, {"a": 0.0}])
    frac = Fraction(1, 3)
    worst = max(worst, abs(drift - float(frac)), abs(three - float((frac + 1) / 2)))
    dt = time.perf_counter() - t
    record(9, worst <= 1e-12 and dt < 1, f"max deviation {worst:.1e}; drift turnover {drift!r}, {dt:.3f}s")


# coefficient and p-value of each trading-friction characteristic in the lifetime accuracy regression
TRADING_FRICTIONS = [
    ("Beta", -0.042, 0.000), ("Price Delay", -0.006, 0.000), ("Illiquidity", -0.011, 0.000),
    ("Industry Adjusted Size", 0.004, 0.000), ("Abnormal Earnings Announcement Volume", -0.010, 0.000),
    ("Maximum Daily Return", -0.014, 0.000), ("Zero Trading Days", 0.006, 0.000),
    ("Volatility of Liquidity (Dollar Trading Volume)", 0.004, 0.000), ("Bid-Ask Spread", 0.012, 0.000),
    ("Share Turnover", -0.006, 0.005), ("Dollar Trading Volume", 0.017, 0.000),
    ("Volatility of Liquidity (Share Turnover)", 0.004, 0.128), ("Beta Squared", 0.037, 0.000),
    ("Idiosyncratic Return Volatility", 0.001, 0.393), ("Return Volatility", 0.069, 0.000),
]


def _friction_summary():
    records = {"variable": [v for v, _, _ in TRADING_FRICTIONS],
               "coefficient": [c for _, c, _ in TRADING_FRICTIONS],
               "p_value": [p for _, _, p in TRADING_FRICTIONS]}
    return category_summary(records, {v: "Trading Frictions" for v, _, _ in TRADING_FRICTIONS})[0]


def test_criterion_10_category_aggregation():
    t = time.perf_counter()
    s = _friction_summary()
    dt = time.perf_counter() - t
    ok = round(s.sum_significant, 4) == 0.0578 and s.n_significant == 13 and s.n_total == 15 and dt < 1
    record(10, ok, f"sum {s.sum_significant:.4f} (target 0.0578), {s.n_significant} of {s.n_total} significant "
                   f"(target 13 of 15), {dt:.3f}s")


def test_friction_counts():
    s = _friction_summary()
    assert (s.n_significant, s.n_total) == (13, 15)
    assert s.sum_significant == pytest.approx(0.060, abs=1e-12)


def test_criterion_11_determinism(tmp_path):
    t = time.perf_counter()
    cfg = {"seed": 3, "data": {"synth": {"n_stocks": 400, "n_months": 48, "seed": 3}},
           "models": ["gbm3_20", "mlp1_16"], "benchmark": {"iters": 100, "draw": 500}}
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(cfg))
    codes = [main(["run", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / d)]) for d in ("a", "b")]
    a = {p.name: p.read_bytes() for p in sorted((tmp_path / "a").iterdir())}
    b = {p.name: p.read_bytes() for p in sorted((tmp_path / "b").iterdir())}
    differ = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    dt = time.perf_counter() - t
    ok = codes == [0, 0] and not differ and any(k.endswith(".png") for k in a)
    record(11, ok, f"{len(a)} files, {len(differ)} differ {differ[:3]}, {dt:.0f}s for two runs")


def test_criterion_12_probability_adjusted_rule():
    t = time.perf_counter()
    wins, detail = 0, []
    for seed in range(10):
        panel = generate_panel(SynthSpec(n_stocks=500, n_months=60, n_features=0, seed=100 + seed))
        rng = np.random.default_rng(seed)
        # argmax pulled to states 5 and 6; p1 and p10 still rank the extreme stocks
        z = rng.normal(0.0, 1.0, (len(panel), 10))
        z[:, 4:6] += 3.0
        z[:, 9] += panel.state == 10
        z[:, 0] += panel.state == 1
        preds = PredictionSet(panel.stock_id, panel.month, softmax(z))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyLegWarning)
            mp = sharpe(form_portfolio(preds, panel, MaxProb()).long_short)
            pa = sharpe(form_portfolio(preds, panel, ProbabilityAdjusted(0.10)).long_short)
        wins += pa > mp
        detail.append(f"{pa:.2f}>{mp:.2f}" if pa > mp else f"{pa:.2f}<={mp:.2f}")
    dt = time.perf_counter() - t
    record(12, wins >= 8 and dt < 300, f"probability-adjusted SR wins {wins} of 10 ({' '.join(detail[:3])} ...), {dt:.0f}s")
