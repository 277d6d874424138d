"""Post-hoc analysis of predictions and fitted models."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import linalg, stats as sps

from .errors import RankDeficiencyError, ValidationError
from .learners.base import Model, PredictionSet
from .learners.trees import TreeEnsembleModel
from .panel import Panel, cross_sectional_zscore

INTERCEPT = "const"


def model_certainty(probs):
    """Population variance of each probability vector (0 for uniform, 0.09 for one-hot)."""
    return np.var(np.asarray(probs, dtype=float), axis=-1)


def model_confidence(probs):
    return np.max(np.asarray(probs, dtype=float), axis=-1)


# -- OLS ------------------------------------------------------------------------------


@dataclass
class OlsResult:
    names: list
    coefficients: np.ndarray
    standard_errors: np.ndarray
    t_stats: np.ndarray
    p_values: np.ndarray
    r_squared: float
    n: int
    residuals: np.ndarray

    def records(self) -> pd.DataFrame:
        return pd.DataFrame({"variable": self.names, "coefficient": self.coefficients,
                             "std_error": self.standard_errors, "t_stat": self.t_stats,
                             "p_value": self.p_values})

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.names.index(name)])


def ols(design, y, names=None, rank_tol: float = 1e-10) -> OlsResult:
    """Least squares through a QR factorization with classical standard errors.

    ``design`` should already contain the intercept column. p-values are
    two-sided from the t distribution with n - k degrees of freedom.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y):
        raise ValidationError("design and response must have matching rows")
    n, k = X.shape
    if n < k:
        raise ValidationError(f"{n} rows cannot identify {k} coefficients")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValidationError("design and response must be finite")
    names = list(names) if names is not None else [f"x{j}" for j in range(k)]
    Q, R = np.linalg.qr(X)
    d = np.abs(np.diag(R))
    if d.size and d.min() <= rank_tol * max(d.max(), 1.0):
        raise RankDeficiencyError("design matrix is rank deficient")
    beta = linalg.solve_triangular(R, Q.T @ y)
    resid = y - X @ beta
    df = n - k
    ssr = float(resid @ resid)
    if df > 0:
        Rinv = linalg.solve_triangular(R, np.eye(k))
        se = np.sqrt(ssr / df * np.sum(Rinv * Rinv, axis=1))
    else:
        se = np.full(k, np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / se, np.nan)
    p = 2 * sps.t.sf(np.abs(t), df) if df > 0 else np.full(k, np.nan)
    sst = float(((y - y.mean()) ** 2).sum())
    r2 = float(np.clip(1.0 - ssr / sst, 0.0, 1.0)) if sst > 0 else math.nan
    return OlsResult(names, beta, se, t, p, r2, n, resid)


# -- factor models -----------------------------------------------------------------------

FACTOR_MODELS = {
    "FF3F": ("mkt_rf", "smb", "hml"),
    "FF3F+MOM": ("mkt_rf", "smb", "hml", "mom"),
    "q4": ("r_mkt", "r_me", "r_ia", "r_roe"),
    "q5": ("r_mkt", "r_me", "r_ia", "r_roe", "r_eg"),
}

_ALIASES = {"mkt-rf": "mkt_rf", "mktrf": "mkt_rf", "umd": "mom", "mkt": "r_mkt", "me": "r_me",
            "ia": "r_ia", "roe": "r_roe", "eg": "r_eg"}


def load_factors(path) -> pd.DataFrame:
    """Factor CSV with a ``yyyymm`` column; factor names are matched case-insensitively."""
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError) as exc:
        raise ValidationError(f"cannot read factor file {path}: {exc}") from exc
    df.columns = [_ALIASES.get(c.strip().lower(), c.strip().lower()) for c in df.columns]
    if "yyyymm" not in df:
        raise ValidationError("factor file needs a yyyymm column")
    if df["yyyymm"].duplicated().any():
        raise ValidationError("factor file repeats months")
    return df.set_index("yyyymm")


def factor_regression(series, factors: pd.DataFrame, model: str = "FF3F") -> OlsResult:
    """Regress monthly portfolio returns on a named factor set; alpha is the intercept."""
    if model not in FACTOR_MODELS:
        raise ValidationError(f"unknown factor model {model!r}; choose from {sorted(FACTOR_MODELS)}")
    cols = FACTOR_MODELS[model]
    missing = [c for c in cols if c not in factors.columns]
    if missing:
        raise ValidationError(f"factor file lacks {missing} for {model}")
    months = np.asarray(series.months)
    absent = np.setdiff1d(months, factors.index.to_numpy())
    if absent.size:
        raise ValidationError(f"factor data missing for {absent.size} months (first {absent[0]})")
    F = factors.loc[months, list(cols)].to_numpy(dtype=float)
    X = np.column_stack([np.ones(len(months)), F])
    return ols(X, series.returns, [INTERCEPT, *cols])


# -- rolling relations ------------------------------------------------------------------


def _pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / den if den > 0 else math.nan


def rolling_correlation(a, b, window: int) -> np.ndarray:
    """Pearson correlation over each trailing window; entry i covers points i..i+window-1."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) != len(b):
        raise ValidationError("series lengths differ")
    if window < 2:
        raise ValidationError("window must be at least 2")
    if window > len(a):
        raise ValidationError(f"window {window} exceeds series length {len(a)}")
    return np.array([_pearson(a[i:i + window], b[i:i + window]) for i in range(len(a) - window + 1)])


def _zscore(x):
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else np.zeros_like(x)


def moving_average_correlation(a, b, window: int) -> float:
    """Correlation of the trailing ``window``-month means of two standardized series."""
    a, b = _zscore(np.asarray(a, float)), _zscore(np.asarray(b, float))
    if window < 1 or window > len(a) - 1:
        raise ValidationError(f"window {window} leaves fewer than 2 smoothed points")
    kernel = np.ones(window) / window
    return _pearson(np.convolve(a, kernel, "valid"), np.convolve(b, kernel, "valid"))


def monthly_aggregates(preds: PredictionSet, panel: Panel) -> pd.DataFrame:
    """Per month: value-weighted market return, mean confidence, mean certainty, accuracy."""
    if not preds.has_truth:
        raise ValidationError("predictions carry no realized states")
    conf, cert = model_confidence(preds.probs), model_certainty(preds.probs)
    hit = preds.argmax_state == preds.truth
    rows = []
    for mth in np.unique(preds.month):
        sl = panel.month_index.get(int(mth))
        if sl is None:
            raise ValidationError(f"panel has no returns for month {mth}")
        m = preds.month == mth
        r, c = panel.ret[sl], panel.mktcap_lag[sl]
        ok = np.isfinite(c)
        mkt = float(c[ok] @ r[ok] / c[ok].sum()) if ok.any() else float(r.mean())
        rows.append({"yyyymm": int(mth), "mkt": mkt, "confidence": float(conf[m].mean()),
                     "certainty": float(cert[m].mean()), "accuracy": float(hit[m].mean())})
    return pd.DataFrame(rows)


RELATION_PAIRS = (("mkt", "confidence"), ("mkt", "certainty"), ("accuracy", "confidence"),
                  ("accuracy", "certainty"), ("mkt", "accuracy"))


def rolling_relation_table(agg: pd.DataFrame, windows=(1, 6, 12, 24, 36, 60, 120)) -> pd.DataFrame:
    """Correlations of smoothed monthly aggregates for each window length (window 1 = raw series)."""
    out = []
    for w in windows:
        if w > len(agg) - 1:
            continue
        row = {"window": w}
        for x, y in RELATION_PAIRS:
            row[f"{x}~{y}"] = moving_average_correlation(agg[x].to_numpy(), agg[y].to_numpy(), w)
        out.append(row)
    return pd.DataFrame(out)


# -- lifetime regressions ----------------------------------------------------------------

APPEARANCE = "appearance"


@dataclass
class LifetimeResult:
    ols: OlsResult
    excluded: list
    n_stocks: int

    def records(self) -> pd.DataFrame:
        return self.ols.records()


def lifetime_regression(panel: Panel, preds: PredictionSet, target: str = "accuracy") -> LifetimeResult:
    """Regress each stock's lifetime mean accuracy (or certainty) on its mean characteristics.

    Characteristics are z-scored within each month first. The number of
    predicted months per stock is also a regressor. Columns that are constant
    across stocks (including that count on a balanced panel) are dropped and
    listed in ``excluded``.
    """
    if target not in ("accuracy", "certainty"):
        raise ValidationError("target must be 'accuracy' or 'certainty'")
    sub = panel.take(np.isin(panel.month, np.unique(preds.month)))
    pos = preds.align(sub)
    if target == "accuracy":
        if not sub.is_labeled:
            raise ValidationError("accuracy target needs realized states")
        y_row = (preds.argmax_state[pos] == sub.state).astype(float)
    else:
        y_row = model_certainty(preds.probs[pos])
    starts, stops = sub._bounds
    Z = cross_sectional_zscore(sub.features, starts, stops - starts)
    codes, inverse = np.unique(sub.stock_id, return_inverse=True)
    if len(codes) < 2:
        raise ValidationError("need at least 2 stocks")
    count = np.bincount(inverse).astype(float)
    y = np.bincount(inverse, weights=y_row) / count
    means = np.column_stack([np.bincount(inverse, weights=Z[:, j]) / count for j in range(Z.shape[1])]) \
        if Z.shape[1] else np.empty((len(codes), 0))
    names, cols, excluded = [], [], []
    candidates = [(nm, means[:, j]) for j, nm in enumerate(sub.feature_names)] + [(APPEARANCE, count)]
    for nm, col in candidates:
        if np.ptp(col) <= 1e-12 * max(1.0, np.abs(col).max()):
            excluded.append(nm)
        else:
            names.append(nm)
            cols.append(col)
    X = np.column_stack([np.ones(len(codes)), *cols])
    return LifetimeResult(ols(X, y, [INTERCEPT, *names]), excluded, len(codes))


@dataclass(frozen=True)
class CategorySummary:
    category: str
    sum_significant: float
    n_significant: int
    n_total: int
    alpha_level: float = 0.10


def category_summary(records, categories: dict, alpha: float = 0.10) -> list[CategorySummary]:
    """Per category: sum and count of coefficients with p < alpha, and the category size.

    ``records`` needs ``variable``, ``coefficient`` and ``p_value`` columns; the
    intercept row is ignored. Categories appear in first-mention order.
    """
    df = pd.DataFrame(records)
    df = df[df["variable"] != INTERCEPT]
    unmapped = [v for v in df["variable"] if v not in categories]
    if unmapped:
        raise ValidationError(f"variables without a category: {unmapped}")
    out = []
    cats = list(dict.fromkeys(categories[v] for v in df["variable"]))
    for cat in cats:
        part = df[df["variable"].map(categories) == cat]
        sig = part["p_value"].to_numpy() < alpha
        out.append(CategorySummary(cat, float(part["coefficient"].to_numpy()[sig].sum()),
                                   int(sig.sum()), len(part), alpha))
    return out


# -- importance ------------------------------------------------------------------------


def feature_importance(model: Model) -> pd.DataFrame:
    """Summed split gain per feature with max-normalized and percentage shares, ranked."""
    if not isinstance(model, TreeEnsembleModel):
        raise ValidationError("variable importance is only defined for tree ensembles")
    score = model.feature_importance()
    top, total = score.max(), score.sum()
    df = pd.DataFrame({"feature": list(model.feature_names), "score": score,
                       "relative": score / top if top > 0 else np.zeros_like(score),
                       "percent": 100 * score / total if total > 0 else np.zeros_like(score)})
    order = np.lexsort((np.arange(len(score)), -score))
    df["rank"] = 0
    df.loc[order, "rank"] = np.arange(1, len(score) + 1)
    return df
