"""Report tables assembled from predictions: overall accuracy and by-class metrics."""
from __future__ import annotations

import pandas as pd

from .learners.base import PredictionSet
from .stats import accuracy_test, by_class_metrics, confusion, kappa, overall_accuracy

ACCURACY_COLUMNS = ["model", "accuracy", "kappa", "ci_lo", "ci_hi", "no_info_accuracy", "no_info_p",
                    "martingale_accuracy", "martingale_p", "n"]


def accuracy_row(name: str, preds: PredictionSet, no_info: float, martingale: float,
                 ci_level: float = 0.99) -> dict:
    """Accuracy and kappa with exact one-sided binomial tests against both benchmarks."""
    m = confusion(preds.truth, preds.argmax_state)
    vs_info = accuracy_test(preds.truth, preds.argmax_state, no_info, ci_level)
    vs_mart = accuracy_test(preds.truth, preds.argmax_state, martingale, ci_level)
    return {"model": name, "accuracy": overall_accuracy(m), "kappa": kappa(m), "ci_lo": vs_info.ci_lo,
            "ci_hi": vs_info.ci_hi, "no_info_accuracy": no_info, "no_info_p": vs_info.p_value,
            "martingale_accuracy": martingale, "martingale_p": vs_mart.p_value, "n": m.n}


def by_class_table(preds: PredictionSet) -> pd.DataFrame:
    rows = [c.as_dict() for c in by_class_metrics(confusion(preds.truth, preds.argmax_state))]
    return pd.DataFrame(rows)
