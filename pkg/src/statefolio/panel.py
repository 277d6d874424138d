"""Stock-month panels, their return-state labels and train/test splits.

A :class:`Panel` stores one row per (stock, month) in column arrays sorted by
month and then stock id. Months are integers in ``YYYYMM`` form. Return states
are integers 1..10 with 0 meaning "unassigned".
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

from .errors import ValidationError

N_STATES = 10

# -- month arithmetic ---------------------------------------------------------


def month_ordinal(yyyymm):
    """Map ``YYYYMM`` to a running month count so consecutive months differ by 1."""
    yyyymm = np.asarray(yyyymm, dtype=np.int64)
    return (yyyymm // 100) * 12 + (yyyymm % 100) - 1


def ordinal_to_month(ordinal):
    ordinal = np.asarray(ordinal, dtype=np.int64)
    return (ordinal // 12) * 100 + ordinal % 12 + 1


def add_months(yyyymm: int, n: int) -> int:
    return int(ordinal_to_month(month_ordinal(yyyymm) + n))


def check_months(months) -> np.ndarray:
    months = np.asarray(months)
    if months.size and not np.issubdtype(months.dtype, np.integer):
        as_float = months.astype(float)
        if not np.all(np.isfinite(as_float)) or np.any(as_float != np.round(as_float)):
            raise ValidationError("malformed month: expected integer YYYYMM values")
        months = as_float.astype(np.int64)
    months = months.astype(np.int64)
    mm = months % 100
    if np.any((mm < 1) | (mm > 12)) or np.any(months < 10001):
        bad = months[(mm < 1) | (mm > 12) | (months < 10001)][0]
        raise ValidationError(f"malformed month {bad}: expected YYYYMM with MM in 01..12")
    return months


# -- data model ---------------------------------------------------------------


@dataclass(frozen=True)
class StockMonth:
    stock_id: str
    month: int
    ret: float
    mktcap_lag: float
    features: tuple
    state: int | None = None


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class Panel:
    """Immutable collection of stock-month observations.

    Parameters
    ----------
    stock_id, month, ret : array-like
        Row identifiers and the decimal monthly return.
    mktcap_lag : array-like, optional
        Market capitalization at month t-1; NaN where missing.
    features : 2-D array-like, optional
        Predictors, NaN where missing.
    state : array-like, optional
        Return states 1..10, or 0 for unassigned.
    """

    def __init__(self, stock_id, month, ret, mktcap_lag=None, features=None,
                 feature_names=None, state=None, *, _presorted=False):
        stock_id = np.asarray(stock_id).astype(str)
        month = check_months(month)
        ret = np.asarray(ret, dtype=float)
        n = len(stock_id)
        if len(month) != n or len(ret) != n:
            raise ValidationError("stock_id, month and ret must have equal length")
        if not np.all(np.isfinite(ret)):
            raise ValidationError("returns must be finite; drop missing returns before construction")
        mktcap_lag = np.full(n, np.nan) if mktcap_lag is None else np.asarray(mktcap_lag, dtype=float)
        if features is None:
            features = np.empty((n, 0))
        features = np.asarray(features, dtype=float).reshape(n, -1)
        if feature_names is None:
            feature_names = [f"f_{j + 1}" for j in range(features.shape[1])]
        feature_names = tuple(str(f) for f in feature_names)
        if len(feature_names) != features.shape[1]:
            raise ValidationError("feature_names does not match the feature matrix width")
        state = np.zeros(n, dtype=np.int8) if state is None else np.asarray(state).astype(np.int8)
        if np.any((state < 0) | (state > N_STATES)):
            raise ValidationError("states must lie in 1..10 (0 = unassigned)")

        if not _presorted:
            order = np.lexsort((stock_id, month))
            stock_id, month, ret = stock_id[order], month[order], ret[order]
            mktcap_lag, features, state = mktcap_lag[order], features[order], state[order]
        if n > 1:
            dup = (month[1:] == month[:-1]) & (stock_id[1:] == stock_id[:-1])
            if dup.any():
                i = int(np.flatnonzero(dup)[0])
                raise ValidationError(f"duplicate (stock_id, month) pair ({stock_id[i]}, {month[i]})")

        self.stock_id = _readonly(stock_id)
        self.month = _readonly(month)
        self.ret = _readonly(ret)
        self.mktcap_lag = _readonly(mktcap_lag)
        self.features = _readonly(features)
        self.feature_names = feature_names
        self.state = _readonly(state)

    # construction helpers keep sort order, so they skip the re-sort
    def _replace(self, **changes) -> "Panel":
        kw = dict(stock_id=self.stock_id, month=self.month, ret=self.ret,
                  mktcap_lag=self.mktcap_lag, features=self.features,
                  feature_names=self.feature_names, state=self.state)
        kw.update(changes)
        return Panel(**kw, _presorted=True)

    def with_states(self, state) -> "Panel":
        return self._replace(state=state)

    def with_features(self, features, feature_names=None) -> "Panel":
        return self._replace(features=features, feature_names=feature_names or self.feature_names)

    def take(self, index) -> "Panel":
        """Row subset; ``index`` is a boolean mask or sorted integer positions."""
        index = np.asarray(index)
        if index.dtype != bool:
            index = np.sort(index)
        return Panel(self.stock_id[index], self.month[index], self.ret[index],
                     self.mktcap_lag[index], self.features[index], self.feature_names,
                     self.state[index], _presorted=True)

    def select_features(self, names: Sequence[str]) -> "Panel":
        missing = [n for n in names if n not in self.feature_names]
        if missing:
            raise ValidationError(f"unknown features: {missing}")
        cols = [self.feature_names.index(n) for n in names]
        return self._replace(features=self.features[:, cols], feature_names=tuple(names))

    def __len__(self):
        return len(self.ret)

    def __repr__(self):
        return (f"Panel(rows={len(self)}, months={len(self.months)}, "
                f"features={self.n_features}, labeled={self.is_labeled})")

    def __iter__(self) -> Iterator[StockMonth]:
        for i in range(len(self)):
            yield self.row(i)

    def row(self, i) -> StockMonth:
        s = int(self.state[i])
        return StockMonth(str(self.stock_id[i]), int(self.month[i]), float(self.ret[i]),
                          float(self.mktcap_lag[i]), tuple(self.features[i].tolist()), s or None)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def is_labeled(self) -> bool:
        return len(self) > 0 and bool(np.all(self.state > 0))

    @cached_property
    def months(self) -> np.ndarray:
        return _readonly(np.unique(self.month))

    @cached_property
    def _bounds(self):
        starts = np.flatnonzero(np.r_[True, self.month[1:] != self.month[:-1]]) if len(self) else np.array([], int)
        stops = np.r_[starts[1:], len(self)].astype(int)
        return starts, stops

    @cached_property
    def month_index(self) -> dict:
        """Month -> slice of the rows observed in that month."""
        starts, stops = self._bounds
        return {int(self.month[a]): slice(int(a), int(b)) for a, b in zip(starts, stops)}

    def month_blocks(self):
        """Yield ``(month, slice)`` in chronological order."""
        return iter(self.month_index.items())

    @cached_property
    def _stock_codes(self):
        _, codes = np.unique(self.stock_id, return_inverse=True)
        return codes

    @cached_property
    def prior_index(self) -> np.ndarray:
        """Row position of the same stock in the previous calendar month, or -1."""
        n = len(self)
        ords = month_ordinal(self.month)
        order = np.lexsort((ords, self._stock_codes))
        prior = np.full(n, -1, dtype=np.int64)
        if n > 1:
            a, b = order[:-1], order[1:]
            ok = (self._stock_codes[a] == self._stock_codes[b]) & (ords[b] - ords[a] == 1)
            prior[b[ok]] = a[ok]
        return _readonly(prior)

    def consecutive_pairs(self):
        """Row positions ``(t, t+1)`` for every stock observed in two consecutive months."""
        later = np.flatnonzero(self.prior_index >= 0)
        return self.prior_index[later], later

    def prior_state(self) -> np.ndarray:
        """State of the same stock one month earlier; 0 if that row is absent."""
        out = np.zeros(len(self), dtype=np.int8)
        has = self.prior_index >= 0
        out[has] = self.state[self.prior_index[has]]
        return out

    def state_distribution(self) -> np.ndarray:
        if not self.is_labeled:
            raise ValidationError("panel has unassigned return states")
        counts = np.bincount(self.state, minlength=N_STATES + 1)[1:]
        return counts / counts.sum()

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"stock_id": self.stock_id, "yyyymm": self.month,
                           "ret": self.ret, "mktcap_lag": self.mktcap_lag})
        if np.any(self.state > 0):
            df["state"] = pd.Series(self.state, dtype="Int64").mask(self.state == 0)
        for j, name in enumerate(self.feature_names):
            df[name] = self.features[:, j]
        return df

    def equals(self, other: "Panel") -> bool:
        return (self.feature_names == other.feature_names
                and np.array_equal(self.stock_id, other.stock_id)
                and np.array_equal(self.month, other.month)
                and np.array_equal(self.ret, other.ret)
                and np.array_equal(self.mktcap_lag, other.mktcap_lag, equal_nan=True)
                and np.array_equal(self.features, other.features, equal_nan=True)
                and np.array_equal(self.state, other.state))


# -- CSV ingestion --------------------------------------------------------------


@dataclass(frozen=True)
class PanelSchema:
    """Column names of a panel CSV. ``features=None`` takes every other column."""
    stock_id: str = "stock_id"
    month: str = "yyyymm"
    ret: str = "ret"
    mktcap_lag: str = "mktcap_lag"
    state: str = "state"
    features: tuple | None = None

    @classmethod
    def from_mapping(cls, mapping) -> "PanelSchema":
        mapping = dict(mapping or {})
        if "features" in mapping and mapping["features"] is not None:
            mapping["features"] = tuple(mapping["features"])
        return cls(**mapping)


def load_panel(path, schema: PanelSchema | dict | None = None) -> Panel:
    """Read a panel CSV (one row per stock-month; empty cell = missing).

    Rows with a missing return are dropped. Missing features and caps are kept
    as NaN.
    """
    if not isinstance(schema, PanelSchema):
        schema = PanelSchema.from_mapping(schema)
    if not os.path.isfile(path):
        raise ValidationError(f"panel file not found: {path}")
    try:
        df = pd.read_csv(path, dtype={schema.stock_id: str}, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ValidationError(f"unreadable panel file {path}: {exc}") from exc
    required = [schema.stock_id, schema.month, schema.ret]
    absent = [c for c in required if c not in df.columns]
    if absent:
        raise ValidationError(f"panel file {path} lacks columns {absent}")
    core = {schema.stock_id, schema.month, schema.ret, schema.mktcap_lag, schema.state}
    feature_cols = list(schema.features) if schema.features is not None else [c for c in df.columns if c not in core]
    absent = [c for c in feature_cols if c not in df.columns]
    if absent:
        raise ValidationError(f"panel file {path} lacks feature columns {absent}")

    ret = pd.to_numeric(df[schema.ret], errors="coerce").to_numpy(float)
    keep = np.isfinite(ret)
    df = df.loc[keep]
    if df[schema.month].isna().any():
        raise ValidationError("malformed month: empty yyyymm cell")
    months = pd.to_numeric(df[schema.month], errors="coerce")
    if months.isna().any():
        raise ValidationError(f"malformed month value {df[schema.month][months.isna()].iloc[0]!r}")
    cap = (pd.to_numeric(df[schema.mktcap_lag], errors="coerce").to_numpy(float)
           if schema.mktcap_lag in df.columns else None)
    state = None
    if schema.state in df.columns:
        state = pd.to_numeric(df[schema.state], errors="coerce").fillna(0).to_numpy().astype(np.int8)
    feats = df[feature_cols].apply(pd.to_numeric, errors="coerce").to_numpy(float) if feature_cols else None
    return Panel(df[schema.stock_id].to_numpy(str), months.to_numpy(), ret[keep], cap, feats,
                 feature_cols, state)


def write_panel(panel: Panel, path) -> None:
    """Write ``panel`` as CSV; floats use shortest round-trip formatting."""
    panel.to_frame().to_csv(path, index=False, na_rep="")


# -- labeling -------------------------------------------------------------------


def state_thresholds(values, k: int = N_STATES) -> np.ndarray:
    """Lower bounds of states 2..k for one month.

    The bound of state ``j+1`` is the upper empirical quantile
    ``inf{x : F(x) > j/k}``, i.e. the order statistic at 0-based position
    ``floor(j*n/k)``. With distinct values this gives every state
    ``floor(n/k)`` or ``ceil(n/k)`` members.
    """
    v = np.sort(np.asarray(values, dtype=float))
    n = len(v)
    pos = (np.arange(1, k) * n) // k
    return v[pos]


def assign_return_states(panel: Panel, k: int = N_STATES) -> Panel:
    """Label each row with the decile of its return within its month.

    Lower bounds are inclusive, so tied returns share a state and a return equal
    to the 10th percentile lands in state 2.
    """
    states = np.empty(len(panel), dtype=np.int8)
    for month, sl in panel.month_blocks():
        r = panel.ret[sl]
        if len(r) < k:
            raise ValidationError(f"month {month} has {len(r)} rows; need at least {k} to label")
        th = state_thresholds(r, k)
        states[sl] = 1 + np.searchsorted(th, r, side="right")
    return panel.with_states(states)


# -- feature scaling ---------------------------------------------------------------


def _month_groups(panel: Panel):
    starts, stops = panel._bounds
    return starts, stops - starts


def cross_sectional_zscore(x, starts, sizes):
    """Z-score columns of ``x`` within row blocks, ignoring NaN, then fill NaN with 0."""
    x = np.asarray(x, dtype=float)
    present = ~np.isnan(x)
    filled = np.where(present, x, 0.0)
    cnt = np.add.reduceat(present.astype(float), starts, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.add.reduceat(filled, starts, axis=0) / cnt
        dev = np.where(present, x - np.repeat(mean, sizes, axis=0), 0.0)
        var = np.add.reduceat(dev * dev, starts, axis=0) / cnt
    sd = np.sqrt(var)
    scale = np.abs(np.nan_to_num(mean)) + 1.0
    degenerate = ~(sd > 1e-12 * scale)
    sd = np.where(degenerate, 1.0, sd)
    z = dev / np.repeat(sd, sizes, axis=0)
    z[np.repeat(degenerate, sizes, axis=0)] = 0.0
    z[~present] = 0.0
    return z


def expanding_zscore(x, months, starts, sizes):
    """Scale a column by the mean/std of its monthly values over months <= t."""
    x = np.asarray(x, dtype=float)
    present = ~np.isnan(x)
    cnt = np.add.reduceat(present.astype(float), starts)
    with np.errstate(invalid="ignore", divide="ignore"):
        monthly = np.add.reduceat(np.where(present, x, 0.0), starts) / cnt
    ok = np.isfinite(monthly)
    m_val = np.where(ok, monthly, 0.0)
    c = np.cumsum(ok)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.cumsum(m_val) / c
        var = np.cumsum(m_val * m_val) / c - mean * mean
    sd = np.sqrt(np.clip(var, 0.0, None))
    scale = np.abs(np.nan_to_num(mean)) + 1.0
    degenerate = ~(sd > 1e-12 * scale)
    z = (x - np.repeat(mean, sizes)) / np.repeat(np.where(degenerate, 1.0, sd), sizes)
    z[np.repeat(degenerate, sizes)] = 0.0
    z[~present] = 0.0
    return z


def normalize_features(panel: Panel, expanding: Sequence[str] = ()) -> Panel:
    """Cross-sectionally z-score every feature within each month, then fill missing with 0.

    Population standard deviation is used; a month-constant feature becomes all
    zeros. Columns named in ``expanding`` (macro series that are constant across
    stocks) are instead scaled by their own history up to each month.
    """
    if panel.n_features == 0 or len(panel) == 0:
        return panel
    starts, sizes = _month_groups(panel)
    out = cross_sectional_zscore(panel.features, starts, sizes)
    for name in expanding:
        if name not in panel.feature_names:
            raise ValidationError(f"unknown expanding feature {name!r}")
        j = panel.feature_names.index(name)
        out[:, j] = expanding_zscore(panel.features[:, j], panel.months, starts, sizes)
    return panel.with_features(out)


# -- sample splits ---------------------------------------------------------------


@dataclass(frozen=True)
class TimeSeriesSplit:
    """Train on months in ``train_range``, test on ``test_range`` (inclusive bounds)."""
    train_range: tuple
    test_range: tuple

    def __post_init__(self):
        (a, b), (c, d) = self.train_range, self.test_range
        if a > b or c > d:
            raise ValidationError("split ranges must be (start, end) with start <= end")
        if not (b < c or d < a):
            raise ValidationError("time-series train and test ranges overlap")

    @classmethod
    def at(cls, train_end: int, first: int = 0, last: int = 999912) -> "TimeSeriesSplit":
        return cls((first, train_end), (add_months(train_end, 1), last))

    def swapped(self) -> "TimeSeriesSplit":
        return TimeSeriesSplit(self.test_range, self.train_range)


@dataclass(frozen=True)
class CrossSectionalSplit:
    """Route odd calendar months to one side and even months to the other."""
    train_parity: str = "odd"

    def __post_init__(self):
        if self.train_parity not in ("odd", "even"):
            raise ValidationError("train_parity must be 'odd' or 'even'")


SplitSpec = TimeSeriesSplit | CrossSectionalSplit


def split_masks(months, spec: SplitSpec):
    months = np.asarray(months)
    if isinstance(spec, TimeSeriesSplit):
        train = (months >= spec.train_range[0]) & (months <= spec.train_range[1])
        test = (months >= spec.test_range[0]) & (months <= spec.test_range[1])
        if np.any(~(train | test)):
            stray = months[~(train | test)][0]
            raise ValidationError(f"month {stray} falls outside both split ranges")
    elif isinstance(spec, CrossSectionalSplit):
        odd = (months % 100) % 2 == 1
        train = odd if spec.train_parity == "odd" else ~odd
        test = ~train
    else:
        raise ValidationError(f"unknown split spec {spec!r}")
    return train, test


def split_sample(panel: Panel, spec: SplitSpec):
    """Partition ``panel`` into ``(train, test)`` by month range or month parity."""
    train, test = split_masks(panel.month, spec)
    if not train.any():
        raise ValidationError("split leaves the training sample empty")
    if not test.any():
        raise ValidationError("split leaves the test sample empty")
    return panel.take(train), panel.take(test)
