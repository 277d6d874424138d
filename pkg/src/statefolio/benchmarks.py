"""Limited-information benchmark classifiers and their Monte Carlo comparison.

Six classifiers are compared: uniform random, random with the in-sample (IS)
state distribution, the modal IS state, random with the out-of-sample (OOS)
distribution, the modal OOS state, and the martingale classifier that repeats
last month's state. Their simulated accuracies are compared with Tukey's HSD.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import stats as sps

from .errors import ValidationError
from .panel import N_STATES, Panel, SplitSpec, split_masks


class BenchmarkKind(Enum):
    UNIFORM_RANDOM = 1
    IS_DISTRIBUTION_RANDOM = 2
    IS_NAIVE = 3
    OOS_DISTRIBUTION_RANDOM = 4
    OOS_NAIVE = 5
    MARTINGALE = 6

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass
class BenchmarkContext:
    is_dist: np.ndarray | None = None
    oos_dist: np.ndarray | None = None
    prior_states: np.ndarray | None = None


@dataclass
class AccuracySample:
    classifier: BenchmarkKind
    draws: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.nanmean(self.draws))


def _check_dist(dist, name):
    if dist is None:
        raise ValidationError(f"{name} distribution required for this classifier")
    dist = np.asarray(dist, dtype=float)
    if dist.shape != (N_STATES,) or np.any(dist < 0) or abs(dist.sum() - 1.0) > 1e-6:
        raise ValidationError(f"{name} distribution must be 10 nonnegative shares summing to 1")
    return dist


def _draw_from(dist, size, rng):
    cum = np.cumsum(dist)
    cum[-1] = 1.0
    return (np.searchsorted(cum, rng.random(size), side="right") + 1).astype(np.int8)


def modal_state(dist) -> int:
    return int(np.argmax(dist)) + 1


def benchmark_predict(kind: BenchmarkKind, context: BenchmarkContext, n_rows: int, seed=None):
    """Predicted states for ``n_rows`` rows.

    For :attr:`BenchmarkKind.MARTINGALE` the prediction is
    ``context.prior_states``; rows without a prior-month state come back as 0
    and count as skipped.
    """
    rng = np.random.default_rng(seed)
    if kind is BenchmarkKind.UNIFORM_RANDOM:
        return rng.integers(1, N_STATES + 1, size=n_rows).astype(np.int8)
    if kind is BenchmarkKind.IS_DISTRIBUTION_RANDOM:
        return _draw_from(_check_dist(context.is_dist, "IS"), n_rows, rng)
    if kind is BenchmarkKind.OOS_DISTRIBUTION_RANDOM:
        return _draw_from(_check_dist(context.oos_dist, "OOS"), n_rows, rng)
    if kind is BenchmarkKind.IS_NAIVE:
        return np.full(n_rows, modal_state(_check_dist(context.is_dist, "IS")), dtype=np.int8)
    if kind is BenchmarkKind.OOS_NAIVE:
        return np.full(n_rows, modal_state(_check_dist(context.oos_dist, "OOS")), dtype=np.int8)
    if kind is BenchmarkKind.MARTINGALE:
        if context.prior_states is None:
            raise ValidationError("martingale classifier needs prior-month states")
        prior = np.asarray(context.prior_states, dtype=np.int8)
        if len(prior) != n_rows:
            raise ValidationError("prior_states length differs from n_rows")
        return prior.copy()
    raise ValidationError(f"unknown benchmark {kind!r}")


def no_information_accuracy(state_distribution) -> float:
    """Accuracy of always predicting the most populated state."""
    return float(np.max(_check_dist(state_distribution, "state")))


def martingale_accuracy(panel: Panel) -> float:
    """Share of consecutive-month pairs whose state repeats."""
    t0, t1 = panel.consecutive_pairs()
    if len(t0) == 0:
        raise ValidationError("panel has no consecutive-month pairs")
    return float(np.mean(panel.state[t0] == panel.state[t1]))


def martingale_accuracy_from_matrix(transition, prevalence, atol: float = 1e-3) -> float:
    """``sum_s prevalence[s] * transition[s, s]``; rows must sum to 1 within ``atol``."""
    m = np.asarray(transition, dtype=float)
    prevalence = np.asarray(prevalence, dtype=float)
    if m.shape != (N_STATES, N_STATES):
        raise ValidationError("transition must be 10x10")
    if np.any(np.abs(m.sum(axis=1) - 1.0) > atol):
        raise ValidationError("transition rows must sum to 1")
    return float(prevalence @ np.diag(m))


# -- Monte Carlo study ------------------------------------------------------------

_CHUNK = 250


def monte_carlo_benchmark_study(panel: Panel, split: SplitSpec, n_draw: int = 4886,
                                iters: int = 10000, seed: int = 0) -> dict:
    """Simulated accuracies of the six benchmark classifiers.

    Each iteration samples ``n_draw`` test-region rows with replacement and
    scores every classifier on them. IS/OOS distributions come from the two
    sides of ``split``; prior-month states come from the whole panel. Returns
    ``{BenchmarkKind: AccuracySample}``.
    """
    if not panel.is_labeled:
        raise ValidationError("benchmark study needs a labeled panel")
    train_mask, test_mask = split_masks(panel.month, split)
    test_idx = np.flatnonzero(test_mask)
    if len(test_idx) < 1:
        raise ValidationError("test region is empty")
    if not train_mask.any():
        raise ValidationError("in-sample region is empty")
    states = panel.state[test_idx]
    prior = panel.prior_state()[test_idx]
    is_dist = np.bincount(panel.state[train_mask], minlength=N_STATES + 1)[1:] / train_mask.sum()
    oos_dist = np.bincount(states, minlength=N_STATES + 1)[1:] / len(states)
    is_mode, oos_mode = modal_state(is_dist), modal_state(oos_dist)

    out = {k: np.empty(iters) for k in BenchmarkKind}
    n_chunks = math.ceil(iters / _CHUNK)
    for c, ss in enumerate(np.random.SeedSequence(seed).spawn(n_chunks)):
        rng = np.random.default_rng(ss)
        lo, hi = c * _CHUNK, min(iters, (c + 1) * _CHUNK)
        shape = (hi - lo, n_draw)
        pick = rng.integers(0, len(test_idx), size=shape)
        truth = states[pick]
        out[BenchmarkKind.UNIFORM_RANDOM][lo:hi] = (rng.integers(1, N_STATES + 1, size=shape) == truth).mean(1)
        out[BenchmarkKind.IS_DISTRIBUTION_RANDOM][lo:hi] = (_draw_from(is_dist, shape, rng) == truth).mean(1)
        out[BenchmarkKind.IS_NAIVE][lo:hi] = (truth == is_mode).mean(1)
        out[BenchmarkKind.OOS_DISTRIBUTION_RANDOM][lo:hi] = (_draw_from(oos_dist, shape, rng) == truth).mean(1)
        out[BenchmarkKind.OOS_NAIVE][lo:hi] = (truth == oos_mode).mean(1)
        pr = prior[pick]
        has = pr > 0
        with np.errstate(invalid="ignore"):
            out[BenchmarkKind.MARTINGALE][lo:hi] = ((pr == truth) & has).sum(1) / has.sum(1)
    return {k: AccuracySample(k, v) for k, v in out.items()}


# -- studentized range distribution -------------------------------------------------


def _check_range_args(k, df):
    if k < 2 or not df > 0:
        raise ValidationError("studentized range needs k >= 2 and df > 0")


def studentized_range_cdf(q, k: int, df: float) -> float:
    """P(Q <= q) for the studentized range with ``k`` means and ``df`` error degrees of freedom."""
    _check_range_args(k, df)
    if q <= 0:
        return 0.0
    return float(sps.studentized_range.cdf(q, k, df))


def studentized_range_sf(q, k, df) -> float:
    _check_range_args(k, df)
    if q <= 0:
        return 1.0
    return float(np.clip(sps.studentized_range.sf(q, k, df), 0.0, 1.0))


def studentized_range_ppf(p, k, df) -> float:
    if not 0 < p < 1:
        raise ValidationError("probability must lie in (0, 1)")
    _check_range_args(k, df)
    return float(sps.studentized_range.ppf(p, k, df))


# -- Tukey HSD -------------------------------------------------------------------------


@dataclass(frozen=True)
class TukeyRecord:
    group_a: str
    group_b: str
    diff: float  # mean(b) - mean(a)
    ci_lo: float
    ci_hi: float
    p_value: float


def tukey_hsd(groups: dict, alpha: float = 0.05) -> list[TukeyRecord]:
    """All pairwise Tukey HSD comparisons for a one-way layout.

    ``groups`` maps a name to its observations; pairs follow insertion order.
    """
    names = list(groups)
    if len(names) < 2:
        raise ValidationError("Tukey HSD needs at least two groups")
    data = [np.asarray(groups[g], dtype=float) for g in names]
    data = [d[np.isfinite(d)] for d in data]
    if any(len(d) < 2 for d in data):
        raise ValidationError("each group needs at least two values")
    k = len(data)
    n_tot = sum(len(d) for d in data)
    df = n_tot - k
    sse = sum(((d - d.mean()) ** 2).sum() for d in data)
    if df <= 0 or sse <= 0:
        raise ValidationError("zero within-group variance: Tukey HSD undefined")
    mse = sse / df
    qcrit = studentized_range_ppf(1 - alpha, k, df)
    records = []
    for i, j in itertools.combinations(range(k), 2):
        diff = float(data[j].mean() - data[i].mean())
        se = math.sqrt(mse / 2 * (1 / len(data[i]) + 1 / len(data[j])))
        p = studentized_range_sf(abs(diff) / se, k, df)
        records.append(TukeyRecord(names[i], names[j], diff, diff - qcrit * se, diff + qcrit * se, p))
    return records


def benchmark_table(samples: dict, alpha: float = 0.05) -> list[TukeyRecord]:
    """Tukey HSD across the study's classifiers, labeled 1..6 in classifier order."""
    groups = {str(k.value): samples[k].draws for k in sorted(samples, key=lambda k: k.value)}
    return tukey_hsd(groups, alpha)
