"""Feed-forward tanh network with a 10-way softmax output, trained by mini-batch SGD."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from ..errors import TrainingDivergence, ValidationError
from ..panel import N_STATES, Panel
from .base import EPS, Model, TrainReport, early_stop, softmax, training_arrays

LN2 = math.log(2.0)


@dataclass
class MlpSpec:
    hidden_sizes: tuple = (32, 32)
    l1_lambda: float = 1e-4
    epochs: int = 50
    learning_rate: float = 0.01
    batch_size: int = 256
    seed: int = 0
    min_delta: float = 1e-5
    patience: int = 3
    features: tuple | None = None
    name: str = ""

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if self.features is not None:
            self.features = tuple(self.features)

    def validate(self):
        if not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
            raise ValidationError("hidden_sizes must be positive integers")
        if self.l1_lambda < 0:
            raise ValidationError("l1_lambda must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValidationError("epochs, batch_size and learning_rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        d["features"] = list(self.features) if self.features else None
        d["family"] = "mlp"
        return d

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k != "family"}
        return cls(**d)


def init_params(sizes, rng):
    """Weights uniform on +-1/sqrt(fan_in), zero biases. ``sizes`` includes input and output."""
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        params.append((rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return params


def forward(params, X):
    acts = [X]
    a = X
    for W, b in params[:-1]:
        a = np.tanh(a @ W + b)
        acts.append(a)
    W, b = params[-1]
    return acts, softmax(a @ W + b)


def l1_penalty(params) -> float:
    return float(sum(np.abs(W).sum() for W, _ in params))


def objective(params, X, y, l1: float) -> float:
    """Mean cross-entropy in bits plus ``l1`` times the summed absolute weights."""
    _, P = forward(params, X)
    p = np.maximum(P[np.arange(len(y)), y], EPS)
    return float(-np.mean(np.log2(p))) + l1 * l1_penalty(params)


def gradients(params, X, y, l1: float = 0.0):
    """Gradients of :func:`objective` with respect to every (W, b); L1 uses sign(W)."""
    acts, P = forward(params, X)
    n = len(y)
    delta = P.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n * LN2
    grads = [None] * len(params)
    for i in range(len(params) - 1, -1, -1):
        W, _ = params[i]
        a = acts[i]
        gW = a.T @ delta
        if l1:
            gW = gW + l1 * np.sign(W)
        grads[i] = (gW, delta.sum(axis=0))
        if i:
            delta = (delta @ W.T) * (1.0 - a * a)
    return grads


class MlpModel(Model):
    kind = "mlp"

    def __init__(self, spec: MlpSpec, feature_names, params, report=None, name=""):
        super().__init__(spec, feature_names, report, name)
        self.params = params

    def _proba(self, X):
        return forward(self.params, X)[1]

    def _arrays(self):
        out = {}
        for i, (W, b) in enumerate(self.params):
            out[f"W{i}"], out[f"b{i}"] = W, b
        return out

    @classmethod
    def from_arrays(cls, meta, arrays, report):
        n_layers = sum(1 for k in arrays if k.startswith("W"))
        params = [(arrays[f"W{i}"], arrays[f"b{i}"]) for i in range(n_layers)]
        return cls(MlpSpec.from_dict(meta["spec"]), meta["feature_names"], params, report, meta["name"])


def train_mlp(spec: MlpSpec, train: Panel) -> MlpModel:
    """Mini-batch gradient descent on cross-entropy, with L1 applied as a proximal step.

    After each gradient step every weight is soft-thresholded by
    ``learning_rate * l1_lambda``, which drives weights exactly to zero under a
    large penalty. Training stops early by :func:`~statefolio.learners.base.early_stop`
    on the per-epoch training objective.
    """
    spec.validate()
    X, y = training_arrays(train)
    rng = np.random.default_rng(spec.seed)
    params = init_params([X.shape[1], *spec.hidden_sizes, N_STATES], rng)
    lr, shrink = spec.learning_rate, spec.learning_rate * spec.l1_lambda
    n = len(y)
    report = TrainReport()
    for epoch in range(1, spec.epochs + 1):
        order = rng.permutation(n)
        for s in range(0, n, spec.batch_size):
            idx = order[s:s + spec.batch_size]
            grads = gradients(params, X[idx], y[idx])
            new = []
            for (W, b), (gW, gb) in zip(params, grads):
                W = W - lr * gW
                if shrink:
                    W = np.sign(W) * np.maximum(np.abs(W) - shrink, 0.0)
                new.append((W, b - lr * gb))
            params = new
        loss = objective(params, X, y, spec.l1_lambda)
        if not math.isfinite(loss):
            raise TrainingDivergence(epoch, loss)
        report.loss_by_round.append(loss)
        report.rounds_run = epoch
        if early_stop(report.loss_by_round, spec.min_delta, spec.patience) is not None:
            report.stopped_early = True
            break
    return MlpModel(spec, train.feature_names, params, report)
