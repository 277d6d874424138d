"""Chronological k-fold cross-validation over a grid of model specs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError
from ..panel import Panel
from .base import Model, cross_entropy, features_for, predict_proba
from .mlp import MlpSpec, train_mlp
from .trees import TreeSpec, train_tree_ensemble


def fit(spec, train: Panel) -> Model:
    """Train whichever model family ``spec`` describes."""
    panel = features_for(spec, train)
    if isinstance(spec, MlpSpec):
        return train_mlp(spec, panel)
    if isinstance(spec, TreeSpec):
        return train_tree_ensemble(spec, panel)
    raise ValidationError(f"unsupported spec type {type(spec).__name__}")


def month_folds(months, folds: int):
    """Split the sorted distinct months into ``folds`` contiguous blocks."""
    months = np.unique(months)
    if len(months) < folds:
        raise ValidationError(f"need at least {folds} distinct months, got {len(months)}")
    return [b for b in np.array_split(months, folds)]


@dataclass
class CVResult:
    best_index: int
    best_spec: object
    mean_loss: list
    fold_loss: list
    specs: list


def cross_validate(grid, train: Panel, folds: int = 5) -> CVResult:
    """Mean held-out cross-entropy per spec; lowest wins, ties go to the earlier spec."""
    grid = list(grid)
    if not grid:
        raise ValidationError("empty model grid")
    blocks = month_folds(train.month, folds)
    fold_loss = []
    for spec in grid:
        losses = []
        for block in blocks:
            held = np.isin(train.month, block)
            model = fit(spec, train.take(~held))
            val = train.take(held)
            losses.append(cross_entropy(val, predict_proba(model, val)))
        fold_loss.append(losses)
    mean_loss = [float(np.mean(l)) for l in fold_loss]
    best = min(range(len(grid)), key=lambda i: (mean_loss[i], i))
    return CVResult(best, grid[best], mean_loss, fold_loss, grid)
