"""Shared learner plumbing: prediction sets, cross-entropy, stopping rule, persistence."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from ..errors import ValidationError
from ..panel import N_STATES, Panel, check_months

EPS = 1e-12
MODEL_FORMAT = "statefolio-model"
MODEL_VERSION = 1
PROB_COLS = [f"p{k}" for k in range(1, N_STATES + 1)]


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def argmax_state(probs) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest state on ties
    return (np.argmax(probs, axis=1) + 1).astype(np.int8)


@dataclass
class PredictionSet:
    """Per-row 10-state probability vectors, keyed by (stock_id, month).

    Rows are kept in (month, stock_id) order like :class:`~statefolio.panel.Panel`.
    ``truth`` holds realized states when known (0 otherwise).
    """

    stock_id: np.ndarray
    month: np.ndarray
    probs: np.ndarray
    truth: np.ndarray | None = None
    model_name: str = ""

    def __post_init__(self):
        self.stock_id = np.asarray(self.stock_id).astype(str)
        self.month = check_months(self.month)
        self.probs = np.asarray(self.probs, dtype=float)
        n = len(self.stock_id)
        if self.probs.shape != (n, N_STATES):
            raise ValidationError(f"probs must have shape ({n}, {N_STATES})")
        if np.any(self.probs < 0) or np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-9):
            raise ValidationError("probability vectors must be nonnegative and sum to 1")
        if self.truth is None:
            self.truth = np.zeros(n, dtype=np.int8)
        self.truth = np.asarray(self.truth).astype(np.int8)
        order = np.lexsort((self.stock_id, self.month))
        if np.any(order != np.arange(n)):
            self.stock_id, self.month = self.stock_id[order], self.month[order]
            self.probs, self.truth = self.probs[order], self.truth[order]

    @classmethod
    def from_panel(cls, panel: Panel, probs, model_name: str = "") -> "PredictionSet":
        return cls(panel.stock_id, panel.month, probs, panel.state.copy(), model_name)

    def __len__(self):
        return len(self.stock_id)

    @property
    def argmax_state(self) -> np.ndarray:
        return argmax_state(self.probs)

    @property
    def has_truth(self) -> bool:
        return len(self) > 0 and bool(np.all(self.truth > 0))

    def take(self, index) -> "PredictionSet":
        return PredictionSet(self.stock_id[index], self.month[index], self.probs[index],
                             self.truth[index], self.model_name)

    def between(self, first: int, last: int) -> "PredictionSet":
        return self.take((self.month >= first) & (self.month <= last))

    def align(self, panel: Panel) -> np.ndarray:
        """Positions of ``panel``'s rows in this set; raises if any row lacks a prediction."""
        mine = pd.MultiIndex.from_arrays([self.stock_id, self.month])
        theirs = pd.MultiIndex.from_arrays([panel.stock_id, panel.month])
        pos = mine.get_indexer(theirs)
        if np.any(pos < 0):
            i = int(np.flatnonzero(pos < 0)[0])
            raise ValidationError(f"no prediction for ({panel.stock_id[i]}, {panel.month[i]})")
        return pos

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"stock_id": self.stock_id, "yyyymm": self.month})
        for j, c in enumerate(PROB_COLS):
            df[c] = self.probs[:, j]
        df["pred_state"] = self.argmax_state
        if self.has_truth:
            df["state"] = self.truth
        return df

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def read_csv(cls, path, model_name: str = "") -> "PredictionSet":
        try:
            df = pd.read_csv(path, dtype={"stock_id": str}, float_precision="round_trip")
        except (OSError, pd.errors.ParserError) as exc:
            raise ValidationError(f"cannot read predictions {path}: {exc}") from exc
        missing = [c for c in ["stock_id", "yyyymm", *PROB_COLS] if c not in df]
        if missing:
            raise ValidationError(f"prediction file lacks columns {missing}")
        truth = df["state"].to_numpy() if "state" in df else None
        return cls(df["stock_id"].to_numpy(), df["yyyymm"].to_numpy(), df[PROB_COLS].to_numpy(),
                   truth, model_name)


def cross_entropy(truth, preds) -> float:
    """Mean surprise ``log2(1 / p[true state])`` in bits, probabilities clipped at 1e-12.

    ``truth`` is a labeled :class:`Panel` (matched to ``preds`` by key) or an
    array of states 1..10 (matched by position with a probability matrix).
    """
    if isinstance(truth, Panel):
        if not truth.is_labeled:
            raise ValidationError("panel has unlabeled rows")
        probs = preds.probs[preds.align(truth)] if isinstance(preds, PredictionSet) else np.asarray(preds)
        y = truth.state
    else:
        y = np.asarray(truth)
        probs = preds.probs if isinstance(preds, PredictionSet) else np.asarray(preds, dtype=float)
    if len(y) != len(probs):
        raise ValidationError("every labeled row needs a prediction")
    if len(y) == 0:
        raise ValidationError("no rows to score")
    p = probs[np.arange(len(y)), np.asarray(y, dtype=np.int64) - 1]
    return float(-np.mean(np.log2(np.maximum(p, EPS))))


def early_stop(loss_by_round, min_delta: float = 1e-5, patience: int = 3):
    """1-indexed round at which training stops, or None.

    A round counts toward the streak when its loss improves on the previous
    round's by less than ``min_delta``. Training stops once ``patience``
    such rounds occur in a row.
    """
    losses = list(loss_by_round)
    streak = 0
    for r in range(1, len(losses)):
        if losses[r - 1] - losses[r] < min_delta:
            streak += 1
            if streak >= patience:
                return r + 1
        else:
            streak = 0
    return None


@dataclass
class TrainReport:
    loss_by_round: list = field(default_factory=list)
    stopped_early: bool = False
    rounds_run: int = 0

    def to_dict(self) -> dict:
        return {"loss_by_round": [float(x) for x in self.loss_by_round],
                "stopped_early": self.stopped_early, "rounds_run": self.rounds_run}


class Model:
    """A trained classifier. Subclasses implement ``_proba`` and the array codec."""

    kind = ""

    def __init__(self, spec, feature_names, report: TrainReport | None = None, name: str = ""):
        self.spec = spec
        self.feature_names = tuple(feature_names)
        self.report = report or TrainReport()
        self.name = name or kind_name(spec)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def _proba(self, X) -> np.ndarray:
        raise NotImplementedError

    def predict_proba_array(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValidationError(f"model expects {self.n_features} features, got {X.shape[-1]}")
        if not np.all(np.isfinite(X)):
            raise ValidationError("features must be finite (normalize first)")
        p = self._proba(X)
        return p / p.sum(axis=1, keepdims=True)

    # persistence
    def _arrays(self) -> dict:
        raise NotImplementedError

    def save(self, path) -> None:
        meta = {"format": MODEL_FORMAT, "version": MODEL_VERSION, "kind": self.kind,
                "name": self.name, "feature_names": list(self.feature_names),
                "spec": self.spec.to_dict(), "report": self.report.to_dict()}
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **self._arrays())


def kind_name(spec) -> str:
    return getattr(spec, "name", "") or type(spec).__name__.lower()


def features_for(model_or_spec, panel: Panel) -> Panel:
    """Restrict ``panel`` to the model's feature subset when one is set."""
    subset = getattr(getattr(model_or_spec, "spec", model_or_spec), "features", None)
    return panel.select_features(subset) if subset else panel


def predict_proba(model: Model, panel: Panel) -> PredictionSet:
    """One probability vector per panel row."""
    panel = features_for(model, panel)
    if panel.n_features != model.n_features:
        raise ValidationError(f"model expects {model.n_features} features, panel has {panel.n_features}")
    if panel.feature_names != model.feature_names:
        raise ValidationError(f"feature names differ from training: {panel.feature_names} vs {model.feature_names}")
    return PredictionSet.from_panel(panel, model.predict_proba_array(panel.features), model.name)


def load_model(path) -> Model:
    from .mlp import MlpModel
    from .trees import TreeEnsembleModel

    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read model file {path}: {exc}") from exc
    try:
        meta = json.loads(str(arrays.pop("meta")))
    except (KeyError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path} is not a model file") from exc
    if meta.get("format") != MODEL_FORMAT:
        raise ValidationError(f"{path} is not a model file")
    if meta.get("version") != MODEL_VERSION:
        raise ValidationError(f"unsupported model format version {meta.get('version')}")
    cls = {"mlp": MlpModel, "trees": TreeEnsembleModel}.get(meta["kind"])
    if cls is None:
        raise ValidationError(f"unknown model kind {meta['kind']!r}")
    r = meta["report"]
    report = TrainReport(r["loss_by_round"], r["stopped_early"], r["rounds_run"])
    return cls.from_arrays(meta, arrays, report)


def training_arrays(panel: Panel):
    if not panel.is_labeled:
        raise ValidationError("training panel must be labeled")
    X = np.ascontiguousarray(panel.features, dtype=float)
    if X.shape[1] == 0:
        raise ValidationError("training panel has no features")
    if not np.all(np.isfinite(X)):
        raise ValidationError("training features must be finite (normalize first)")
    return X, panel.state.astype(np.int64) - 1


def save_model(model: Model, path) -> None:
    model.save(Path(path))
