"""State-to-state transition matrices built from consecutive months."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ValidationError
from .learners.base import PredictionSet
from .panel import N_STATES, Panel

KINDS = ("probability", "mean_return", "accuracy")


@dataclass
class TransitionMatrix:
    """10x10 cells indexed [state at t, state at t+1]; NaN marks cells without support."""

    values: np.ndarray
    kind: str
    support: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        labels = [str(s) for s in range(1, N_STATES + 1)]
        df = pd.DataFrame(self.values, index=labels, columns=labels)
        df.index.name = "from_state"
        return df

    def diagonal_mean(self) -> float:
        return float(np.nanmean(np.diag(self.values)))


def _pairs(panel: Panel):
    if not panel.is_labeled:
        raise ValidationError("panel must be labeled")
    t0, t1 = panel.consecutive_pairs()
    if len(t0) == 0:
        raise ValidationError("panel has no consecutive-month pairs")
    return t0, t1


def _support(a, b):
    cell = (a.astype(np.int64) - 1) * N_STATES + (b.astype(np.int64) - 1)
    return np.bincount(cell, minlength=N_STATES * N_STATES).reshape(N_STATES, N_STATES), cell


def transition_matrix(panel: Panel) -> TransitionMatrix:
    t0, t1 = _pairs(panel)
    support, _ = _support(panel.state[t0], panel.state[t1])
    rows = support.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(rows > 0, support / rows, np.nan)
    return TransitionMatrix(values, "probability", support)


def transition_mean_returns(panel: Panel) -> TransitionMatrix:
    t0, t1 = _pairs(panel)
    support, cell = _support(panel.state[t0], panel.state[t1])
    sums = np.bincount(cell, weights=panel.ret[t1], minlength=N_STATES * N_STATES).reshape(N_STATES, N_STATES)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(support > 0, sums / support, np.nan)
    return TransitionMatrix(values, "mean_return", support)


def per_transition_accuracy(panel: Panel, preds: PredictionSet) -> TransitionMatrix:
    """Share of correct argmax predictions in each (state t, state t+1) cell.

    Only pairs whose later month is covered by ``preds`` count; every such row
    must carry a prediction.
    """
    t0, t1 = _pairs(panel)
    covered = np.isin(panel.month[t1], np.unique(preds.month))
    t0, t1 = t0[covered], t1[covered]
    if len(t1) == 0:
        raise ValidationError("predictions cover no month-t+1 rows")
    later = panel.take(t1)
    pred_state = preds.argmax_state[preds.align(later)]
    support, cell = _support(panel.state[t0], later.state)
    hits = np.bincount(cell, weights=(pred_state == later.state).astype(float),
                       minlength=N_STATES * N_STATES).reshape(N_STATES, N_STATES)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(support > 0, hits / support, np.nan)
    return TransitionMatrix(values, "accuracy", support)


def average_matrices(mats) -> TransitionMatrix:
    """Equal-weight cell average across models (cells undefined everywhere stay NaN)."""
    mats = list(mats)
    if not mats:
        raise ValidationError("nothing to average")
    stack = np.stack([m.values for m in mats])
    count = np.isfinite(stack).sum(axis=0)
    values = np.where(count > 0, np.nansum(stack, axis=0) / np.maximum(count, 1), np.nan)
    return TransitionMatrix(values, mats[0].kind, sum(m.support for m in mats))
