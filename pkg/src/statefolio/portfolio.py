"""Long-short portfolios driven by predicted states, plus their performance metrics.

A prediction keyed (stock, m) is formed from information available before
month m, so the holding it implies earns that stock's month-m return; value
weights use the capitalization lagged to month m-1. All dispersion
statistics use the population standard deviation. Returns are monthly and
never annualized.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats as sps

from .errors import EmptyLegWarning, ValidationError, WealthWipedWarning
from .learners.base import PredictionSet
from .panel import N_STATES, Panel


# -- rules and schemes ---------------------------------------------------------------


@dataclass(frozen=True)
class MaxProb:
    """Long the stocks whose most likely state is ``long_state``; short ``short_state``."""

    long_state: int = N_STATES
    short_state: int = 1

    def __post_init__(self):
        if self.long_state == self.short_state:
            raise ValidationError("long_state and short_state must differ")
        for s in (self.long_state, self.short_state):
            if not 1 <= s <= N_STATES:
                raise ValidationError("states must lie in 1..10")


@dataclass(frozen=True)
class ProbabilityAdjusted:
    """Rank rule: a stock joins the long leg when its p10 ranks in the month's
    top ``top_fraction`` and none of its p1..p9 do; the short leg mirrors this on p1."""

    top_fraction: float = 0.10
    long_state: int = N_STATES
    short_state: int = 1

    def __post_init__(self):
        if not 0.0 < self.top_fraction <= 1.0:
            raise ValidationError("top_fraction must lie in (0, 1]")
        if self.long_state == self.short_state:
            raise ValidationError("long_state and short_state must differ")


WEIGHTINGS = ("equal", "value", "probscaled")


@dataclass(frozen=True)
class WeightScheme:
    kind: str = "equal"
    cap_cutoff_pct: float = 0.0

    def __post_init__(self):
        if self.kind not in WEIGHTINGS:
            raise ValidationError(f"weighting must be one of {WEIGHTINGS}")
        if not 0.0 <= self.cap_cutoff_pct < 1.0:
            raise ValidationError("cap_cutoff_pct must lie in [0, 1)")


def make_rule(name: str, top_fraction: float = 0.10):
    name = name.lower()
    if name == "maxprob":
        return MaxProb()
    if name in ("probadj", "probability_adjusted"):
        return ProbabilityAdjusted(top_fraction)
    raise ValidationError(f"unknown allocation rule {name!r}")


# -- selection -------------------------------------------------------------------------


def top_members(scores, m: int) -> np.ndarray:
    """Boolean mask of the ``m`` highest scores; ties go to the earlier row."""
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    mask = np.zeros(len(scores), dtype=bool)
    mask[order[:m]] = True
    return mask


def probability_adjusted_legs(probs, top_fraction: float, long_state: int = N_STATES, short_state: int = 1):
    """Long and short masks for one month's (n, 10) probability block."""
    n = len(probs)
    m = math.ceil(n * top_fraction - 1e-12)
    tops = np.stack([top_members(probs[:, k], m) for k in range(N_STATES)], axis=1)
    counts = tops.sum(axis=1)
    li, si = long_state - 1, short_state - 1
    return tops[:, li] & (counts == 1), tops[:, si] & (counts == 1)


def cap_filter(caps, pct: float) -> np.ndarray:
    """Mask keeping all but the bottom ``floor(n * pct)`` rows by lagged cap (missing caps dropped)."""
    keep = np.isfinite(caps)
    if pct <= 0:
        return np.ones(len(caps), dtype=bool)
    idx = np.flatnonzero(keep)
    cut = int(math.floor(len(idx) * pct))
    order = idx[np.lexsort((idx, caps[idx]))]
    out = np.zeros(len(caps), dtype=bool)
    out[order[cut:]] = True
    return out


def leg_weights(kind: str, caps, qual_prob) -> np.ndarray:
    n = len(caps)
    if n == 0:
        return np.empty(0)
    if kind == "equal":
        return np.full(n, 1.0 / n)
    raw = caps if kind == "value" else qual_prob
    total = raw.sum()
    if not total > 0:
        return np.full(n, 1.0 / n)
    return raw / total


# -- series ---------------------------------------------------------------------------


@dataclass
class PortfolioSeries:
    months: np.ndarray
    returns: np.ndarray
    weights_history: list | None = None  # per month: {stock_id: weight}
    held_returns: list | None = None  # per month: {stock_id: return earned}
    empty_months: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def to_frame(self, name="ret"):
        return pd.DataFrame({"yyyymm": self.months, name: self.returns})


@dataclass
class PortfolioResult:
    long: PortfolioSeries
    short: PortfolioSeries
    long_short: PortfolioSeries
    allocation: tuple = (1.0, 1.0)

    def turnover(self) -> dict:
        lt = series_turnover(self.long)
        st = series_turnover(self.short)
        return {"long": lt, "short": st, "long_short": lt + st}


def _panel_positions(preds: PredictionSet, panel: Panel) -> np.ndarray:
    idx = pd.MultiIndex.from_arrays([panel.stock_id, panel.month])
    return idx.get_indexer(pd.MultiIndex.from_arrays([preds.stock_id, preds.month]))


def form_portfolio(preds: PredictionSet, panel: Panel, rule=None, scheme: WeightScheme | None = None,
                   allocation=(1.0, 1.0)) -> PortfolioResult:
    """Monthly legs from ``preds`` and their realized returns in ``panel``.

    Prediction rows without a realized return in ``panel`` are ignored. An
    empty leg earns 0 that month and triggers :class:`EmptyLegWarning`.
    ``allocation`` is the gross (long, short) exposure of the long-short book.
    """
    rule = rule or MaxProb()
    scheme = scheme or WeightScheme()
    pos = _panel_positions(preds, panel)
    have = pos >= 0
    if not have.any():
        raise ValidationError("no predicted rows have realized returns in the panel")
    sub = preds.take(have)
    pos = pos[have]
    ret = panel.ret[pos]
    caps = panel.mktcap_lag[pos]
    if scheme.kind == "value" and not np.isfinite(caps).any():
        raise ValidationError("value weighting needs lagged market caps")
    argmax = sub.argmax_state
    months = np.unique(sub.month)
    bounds = np.searchsorted(sub.month, np.r_[months, months[-1] + 1])
    legs = {"long": ([], [], []), "short": ([], [], [])}
    empty = {"long": [], "short": []}
    for i, mth in enumerate(months):
        a, b = bounds[i], bounds[i + 1]
        keep = cap_filter(caps[a:b], scheme.cap_cutoff_pct)
        rows = np.arange(a, b)[keep]
        P = sub.probs[rows]
        if isinstance(rule, ProbabilityAdjusted):
            lmask, smask = probability_adjusted_legs(P, rule.top_fraction, rule.long_state, rule.short_state)
        else:
            lmask = argmax[rows] == rule.long_state
            smask = argmax[rows] == rule.short_state
        for leg, mask, state in (("long", lmask, rule.long_state), ("short", smask, rule.short_state)):
            members = rows[mask]
            if scheme.kind == "value":
                members = members[np.isfinite(caps[members])]
            w = leg_weights(scheme.kind, caps[members], sub.probs[members, state - 1])
            r = float(w @ ret[members]) if len(members) else 0.0
            if not len(members):
                empty[leg].append(int(mth))
            legs[leg][0].append(r)
            legs[leg][1].append(dict(zip(sub.stock_id[members].tolist(), w.tolist())))
            legs[leg][2].append(dict(zip(sub.stock_id[members].tolist(), ret[members].tolist())))
    if empty["long"] or empty["short"]:
        warnings.warn(f"empty legs: long {len(empty['long'])} months, short {len(empty['short'])} months",
                      EmptyLegWarning, stacklevel=2)
    series = {leg: PortfolioSeries(months, np.array(v[0]), v[1], v[2], np.array(empty[leg], dtype=np.int64))
              for leg, v in legs.items()}
    ls = allocation[0] * series["long"].returns - allocation[1] * series["short"].returns
    both = np.union1d(series["long"].empty_months, series["short"].empty_months)
    return PortfolioResult(series["long"], series["short"], PortfolioSeries(months, ls, empty_months=both),
                           tuple(allocation))


def buy_hold(panel: Panel, months=None, weighting: str = "equal") -> PortfolioSeries:
    """The all-stock market portfolio, equal- or value-weighted, over ``months``."""
    out_m, out_r = [], []
    for mth, sl in panel.month_blocks():
        if months is not None and mth not in months:
            continue
        r = panel.ret[sl]
        if weighting == "value":
            c = panel.mktcap_lag[sl]
            ok = np.isfinite(c)
            out_r.append(float(c[ok] @ r[ok] / c[ok].sum()) if ok.any() else float(r.mean()))
        else:
            out_r.append(float(r.mean()))
        out_m.append(mth)
    if not out_m:
        raise ValidationError("no months for the market portfolio")
    return PortfolioSeries(np.array(out_m), np.array(out_r))


# -- metrics --------------------------------------------------------------------------


def _series(x):
    return np.asarray(getattr(x, "returns", x), dtype=float)


def _excess(series, rf):
    r = _series(series)
    if rf is None:
        return r
    rf = np.asarray(rf, dtype=float)
    if rf.ndim and len(rf) != len(r):
        raise ValidationError("risk-free series length differs from returns")
    return r - rf


def sharpe(series, rf=None) -> float:
    """Monthly mean excess return over its population standard deviation."""
    x = _excess(series, rf)
    if len(x) < 2:
        raise ValidationError("Sharpe ratio needs at least 2 months")
    mu, sd = x.mean(), x.std()
    if sd <= 1e-14 * max(1.0, abs(mu)):
        raise ValidationError("zero return variance: Sharpe ratio undefined")
    return float(mu / sd)


def long_short_sharpe(long, short) -> float:
    return sharpe(_series(long) - _series(short))


def ceq(series, gamma: float = 1.0, rf=None) -> float:
    """Certainty equivalent ``mean - gamma / 2 * variance``."""
    x = _excess(series, rf)
    if len(x) < 2:
        raise ValidationError("CEQ needs at least 2 months")
    return float(x.mean() - gamma / 2 * x.var())


def cumulative_return(series) -> float:
    """Compounded return net of the initial stake; -1 (with a warning) once wealth is wiped out."""
    r = _series(series)
    if np.any(r <= -1):
        warnings.warn("return of -100% or worse: wealth wiped out", WealthWipedWarning, stacklevel=2)
        return -1.0
    return float(np.prod(1.0 + r) - 1.0)


def wealth_index(series) -> np.ndarray:
    return np.cumprod(np.r_[1.0, 1.0 + _series(series)])


def max_drawdown(series) -> float:
    """Largest fractional fall of the wealth index (starting at 1) from its running peak."""
    w = wealth_index(series)
    if np.any(w <= 0):
        raise ValidationError("wealth index is not positive")
    peak = np.maximum.accumulate(w)
    return float(np.max((peak - w) / peak))


def turnover(weights_history, returns) -> float:
    """Average post-drift rebalancing volume.

    ``weights_history[t]`` maps stock to weight held in month t and
    ``returns[t]`` the returns those holdings earn in month t. Each transition
    compares month t+1 weights with month t weights drifted by month t returns.
    """
    if len(weights_history) < 2:
        raise ValidationError("turnover needs at least 2 months of weights")
    if len(returns) != len(weights_history):
        raise ValidationError("returns must align with weights_history")
    for w in weights_history:
        if abs(sum(w.values()) - 1.0) > 1e-9:
            raise ValidationError("weights must sum to 1 each month")
    return float(np.mean([_transition_turnover(weights_history[t], weights_history[t + 1], returns[t])
                          for t in range(len(weights_history) - 1)]))


def _transition_turnover(w0: dict, w1: dict, r0: dict) -> float:
    grown = {k: v * (1.0 + r0[k]) for k, v in w0.items()}
    total = sum(grown.values())
    drift = {k: v / total for k, v in grown.items()}
    keys = set(drift) | set(w1)
    return sum(abs(w1.get(k, 0.0) - drift.get(k, 0.0)) for k in sorted(keys))


def series_turnover(s: PortfolioSeries) -> float:
    """Turnover of a formed leg, skipping transitions into or out of an empty month."""
    if s.weights_history is None:
        raise ValidationError("series carries no weights")
    vals = [_transition_turnover(s.weights_history[t], s.weights_history[t + 1], s.held_returns[t])
            for t in range(len(s.months) - 1)
            if s.weights_history[t] and s.weights_history[t + 1]]
    return float(np.mean(vals)) if vals else math.nan


@dataclass(frozen=True)
class Moments:
    mean: float
    sd: float
    skewness: float
    kurtosis: float


def moments(series) -> Moments:
    """Mean, population sd, skewness and excess kurtosis (NaN below 4 observations)."""
    x = _series(series)
    if len(x) < 2:
        raise ValidationError("moments need at least 2 observations")
    mu, sd = float(x.mean()), float(x.std())
    if sd <= 1e-14 * max(1.0, abs(mu)):
        return Moments(mu, sd, math.nan, math.nan)
    skew = float(sps.skew(x, bias=True))
    kurt = float(sps.kurtosis(x, fisher=True, bias=True)) if len(x) >= 4 else math.nan
    return Moments(mu, sd, skew, kurt)


PERF_COLUMNS = ["portfolio", "mean", "sd", "skewness", "sr", "ceq", "cumulative_return", "min", "max_dd", "turnover"]


def performance_row(name: str, series, rf=None, gamma: float = 1.0, turnover_value=math.nan) -> dict:
    """One row of the economic-performance table; undefined entries are NaN."""
    r = _series(series)
    m = moments(r)
    try:
        sr = sharpe(r, rf)
    except ValidationError:
        sr = math.nan
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", WealthWipedWarning)
        cum = cumulative_return(r)
    try:
        mdd = max_drawdown(r)
    except ValidationError:
        mdd = 1.0
    return {"portfolio": name, "mean": m.mean, "sd": m.sd, "skewness": m.skewness, "sr": sr,
            "ceq": ceq(r, gamma, rf), "cumulative_return": cum, "min": float(r.min()), "max_dd": mdd,
            "turnover": turnover_value}


def performance_table(result: PortfolioResult, name: str = "model", rf=None, gamma: float = 1.0) -> pd.DataFrame:
    to = result.turnover()
    rows = [performance_row(f"{name}:long", result.long, rf, gamma, to["long"]),
            performance_row(f"{name}:short", result.short, rf, gamma, to["short"]),
            performance_row(f"{name}:long_short", result.long_short, None, gamma, to["long_short"])]
    return pd.DataFrame(rows, columns=PERF_COLUMNS)
