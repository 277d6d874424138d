"""Trainable 10-state classifiers."""
from .base import (EPS, Model, PredictionSet, TrainReport, argmax_state, cross_entropy, early_stop,
                   load_model, predict_proba, save_model, softmax)
from .cv import CVResult, cross_validate, fit, month_folds
from .mlp import MlpModel, MlpSpec, gradients, objective, train_mlp
from .registry import DEFAULT_MODELS, spec_from_name, tuning_grid
from .trees import TreeEnsembleModel, TreeSpec, train_tree_ensemble

__all__ = [
    "EPS", "Model", "PredictionSet", "TrainReport", "argmax_state", "cross_entropy", "early_stop",
    "load_model", "predict_proba", "save_model", "softmax", "CVResult", "cross_validate", "fit",
    "month_folds", "MlpModel", "MlpSpec", "gradients", "objective", "train_mlp", "DEFAULT_MODELS",
    "spec_from_name", "tuning_grid", "TreeEnsembleModel", "TreeSpec", "train_tree_ensemble",
]
