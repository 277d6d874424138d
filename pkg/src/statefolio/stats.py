"""Confusion matrices, by-class metrics, Cohen's kappa and the exact binomial test.

Confusion counts are laid out with rows = predicted state and columns = true
state. Undefined ratios (zero denominators) are reported as NaN, never 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats as sps

from .errors import ValidationError
from .panel import N_STATES


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # (k, k) int64, [predicted, true]

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def k(self) -> int:
        return self.counts.shape[0]


@dataclass(frozen=True)
class ClassMetrics:
    state: int
    sensitivity: float
    specificity: float
    precision: float
    recall: float
    f1: float
    prevalence: float
    detection_prevalence: float
    balanced_accuracy: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class BinomialResult:
    successes: int
    n: int
    accuracy: float
    ci_lo: float
    ci_hi: float
    p_value: float
    benchmark: float
    ci_level: float
    alternative: str


def confusion(truth, pred, k: int = N_STATES) -> ConfusionMatrix:
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape:
        raise ValidationError("truth and pred must have equal length")
    for name, a in (("truth", truth), ("pred", pred)):
        if a.size and (a.min() < 1 or a.max() > k):
            raise ValidationError(f"{name} label out of range 1..{k}")
    flat = np.bincount((pred - 1) * k + (truth - 1), minlength=k * k)
    return ConfusionMatrix(flat.reshape(k, k))


def _ratio(a, b):
    return a / b if b else math.nan


def binary_counts(m: ConfusionMatrix, cls: int):
    """(A, B, C, D) = (TP, FP, FN, TN) for ``cls`` against the rest."""
    c = m.counts
    i = cls - 1
    a = int(c[i, i])
    b = int(c[i, :].sum()) - a
    cc = int(c[:, i].sum()) - a
    d = m.n - a - b - cc
    return a, b, cc, d


def metrics_from_counts(a, b, c, d, beta: float = 1.0, state: int = 0) -> ClassMetrics:
    n = a + b + c + d
    sens = _ratio(a, a + c)
    spec = _ratio(d, b + d)
    prec = _ratio(a, a + b)
    b2 = beta * beta
    if math.isnan(prec) or math.isnan(sens) or (b2 * prec + sens) == 0:
        f1 = math.nan
    else:
        f1 = (1 + b2) * prec * sens / (b2 * prec + sens)
    bal = (sens + spec) / 2 if not (math.isnan(sens) or math.isnan(spec)) else math.nan
    return ClassMetrics(state, sens, spec, prec, sens, f1, _ratio(a + c, n), _ratio(a + b, n), bal)


def class_metrics(m: ConfusionMatrix, cls: int, beta: float = 1.0) -> ClassMetrics:
    """One-vs-rest metrics for state ``cls``."""
    if not 1 <= cls <= m.k:
        raise ValidationError(f"class {cls} outside 1..{m.k}")
    return metrics_from_counts(*binary_counts(m, cls), beta=beta, state=cls)


def by_class_metrics(m: ConfusionMatrix, beta: float = 1.0) -> list[ClassMetrics]:
    return [class_metrics(m, s, beta) for s in range(1, m.k + 1)]


def overall_accuracy(m: ConfusionMatrix) -> float:
    if m.n < 1:
        raise ValidationError("empty confusion matrix")
    return np.trace(m.counts) / m.n


def chance_agreement(m: ConfusionMatrix) -> float:
    n = m.n
    rows = m.counts.sum(axis=1) / n
    cols = m.counts.sum(axis=0) / n
    return float(rows @ cols)


def kappa(m: ConfusionMatrix) -> float:
    """Cohen's kappa with chance agreement sum_k rowshare_k * colshare_k (NaN if that is 1)."""
    po = overall_accuracy(m)
    pe = chance_agreement(m)
    if pe >= 1.0:
        return math.nan
    return (po - pe) / (1 - pe)


# -- binomial test ---------------------------------------------------------------


def log_binom_pmf(x, n, p):
    x = np.asarray(x, dtype=float)
    return (special.gammaln(n + 1) - special.gammaln(x + 1) - special.gammaln(n - x + 1)
            + special.xlogy(x, p) + special.xlog1py(n - x, -p))


def _logsumexp(a):
    if a.size == 0:
        return -math.inf
    mx = a.max()
    return mx + math.log(np.exp(a - mx).sum())


def binomial_tail(successes: int, n: int, p0: float, alternative: str = "greater") -> float:
    """Exact binomial tail probability by log-space summation of the pmf.

    ``greater``: P(X >= successes); ``less``: P(X <= successes);
    ``two-sided``: sum of outcomes no more likely than the observed one.
    """
    if alternative == "greater":
        xs = np.arange(successes, n + 1)
    elif alternative == "less":
        xs = np.arange(0, successes + 1)
    elif alternative == "two-sided":
        all_x = np.arange(n + 1)
        lp = log_binom_pmf(all_x, n, p0)
        obs = lp[successes]
        keep = lp <= obs + 1e-7 * abs(obs) + 1e-300
        return min(1.0, math.exp(_logsumexp(lp[keep])))
    else:
        raise ValidationError(f"unknown alternative {alternative!r}")
    return min(1.0, math.exp(_logsumexp(log_binom_pmf(xs, n, p0))))


def clopper_pearson(successes: int, n: int, level: float = 0.99):
    """Two-sided exact (beta-quantile) interval for a binomial proportion."""
    alpha = 1.0 - level
    lo = 0.0 if successes == 0 else float(sps.beta.ppf(alpha / 2, successes, n - successes + 1))
    hi = 1.0 if successes == n else float(sps.beta.ppf(1 - alpha / 2, successes + 1, n - successes))
    return lo, hi


def binomial_test(successes: int, n: int, p0: float, alternative: str = "greater",
                  ci_level: float = 0.99) -> BinomialResult:
    """Test an observed accuracy ``successes / n`` against benchmark accuracy ``p0``."""
    if not (0.0 < p0 < 1.0) or not np.isfinite(p0):
        raise ValidationError(f"benchmark accuracy must lie in (0, 1), got {p0}")
    successes, n = int(successes), int(n)
    if n < 1 or not 0 <= successes <= n:
        raise ValidationError("need 0 <= successes <= n and n >= 1")
    if not 0.0 < ci_level < 1.0:
        raise ValidationError("ci_level must lie in (0, 1)")
    p = binomial_tail(successes, n, p0, alternative)
    lo, hi = clopper_pearson(successes, n, ci_level)
    acc = successes / n
    lo, hi = min(lo, acc), max(hi, acc)
    return BinomialResult(successes, n, acc, lo, hi, p, p0, ci_level, alternative)


def accuracy_test(truth, pred, benchmark: float, ci_level: float = 0.99) -> BinomialResult:
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    return binomial_test(int((truth == pred).sum()), len(truth), benchmark, "greater", ci_level)
