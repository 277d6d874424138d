"""Synthetic panels with planted Markov return-state dynamics.

Every stock follows a 10-state chain over its cross-sectional return decile.
Each month the state counts are forced to match what
:func:`statefolio.panel.assign_return_states` produces for that cross-section
size, and returns are assigned rank-preservingly, so relabeling the generated
returns reproduces the planted states exactly.

Feature layout (``n_features`` columns, ``f_1..f_p``):

* ``f_1, f_2`` signal pair: their mean lies in ``[(s-1)/10, s/10)`` for a row
  in state ``s`` when the gate fires, and is uniform on [0, 1) otherwise. Each
  coordinate alone is only weakly informative, so recovering the state needs
  an interaction of both.
* ``f_3`` gate: uniform on [0, 1); the signal is genuine iff ``f_3 < signal_fidelity``
* ``f_4..`` pure noise
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ValidationError
from .panel import N_STATES, Panel, month_ordinal, ordinal_to_month

# Monthly decile transition frequencies of US common stocks, 1963-2019.
# Rows are the current state, columns the next state.
EMPIRICAL_TRANSITION = np.array([
    [0.1741, 0.1063, 0.0816, 0.0686, 0.0665, 0.0660, 0.0719, 0.0817, 0.1052, 0.1782],
    [0.1137, 0.1073, 0.0963, 0.0891, 0.0879, 0.0875, 0.0918, 0.0993, 0.1090, 0.1180],
    [0.0859, 0.0987, 0.0997, 0.1011, 0.1007, 0.1033, 0.1050, 0.1054, 0.1059, 0.0944],
    [0.0713, 0.0899, 0.1007, 0.1073, 0.1127, 0.1134, 0.1122, 0.1092, 0.1014, 0.0817],
    [0.0696, 0.0860, 0.0992, 0.1094, 0.1128, 0.1203, 0.1167, 0.1098, 0.0981, 0.0779],
    [0.0690, 0.0868, 0.1002, 0.1084, 0.1138, 0.1177, 0.1186, 0.1116, 0.0970, 0.0768],
    [0.0675, 0.0897, 0.1025, 0.1083, 0.1134, 0.1163, 0.1164, 0.1121, 0.0980, 0.0758],
    [0.0753, 0.0973, 0.1054, 0.1067, 0.1102, 0.1123, 0.1092, 0.1058, 0.0984, 0.0794],
    [0.0958, 0.1103, 0.1061, 0.1023, 0.0976, 0.0974, 0.0971, 0.1009, 0.0999, 0.0927],
    [0.1742, 0.1236, 0.0966, 0.0825, 0.0752, 0.0736, 0.0743, 0.0802, 0.0912, 0.1284],
])

# Mean next-month return for each (current, next) decile pair, same sample.
EMPIRICAL_MEAN_RETURN = np.array([
    [-0.2744, -0.1217, -0.0750, -0.0413, -0.0130, 0.0114, 0.0394, 0.0759, 0.1350, 0.4003],
    [-0.2424, -0.1177, -0.0716, -0.0394, -0.0127, 0.0127, 0.0404, 0.0751, 0.1292, 0.3169],
    [-0.2316, -0.1139, -0.0691, -0.0370, -0.0121, 0.0126, 0.0388, 0.0719, 0.1243, 0.2961],
    [-0.2254, -0.1105, -0.0661, -0.0357, -0.0108, 0.0119, 0.0375, 0.0683, 0.1193, 0.2871],
    [-0.2229, -0.1078, -0.0624, -0.0332, -0.0099, 0.0120, 0.0357, 0.0663, 0.1174, 0.2940],
    [-0.2185, -0.1055, -0.0614, -0.0328, -0.0094, 0.0127, 0.0358, 0.0660, 0.1165, 0.2959],
    [-0.2123, -0.1041, -0.0623, -0.0340, -0.0103, 0.0114, 0.0348, 0.0646, 0.1128, 0.2830],
    [-0.2097, -0.1048, -0.0627, -0.0350, -0.0110, 0.0113, 0.0370, 0.0668, 0.1168, 0.2884],
    [-0.2120, -0.1076, -0.0664, -0.0374, -0.0125, 0.0113, 0.0375, 0.0690, 0.1207, 0.2983],
    [-0.2321, -0.1137, -0.0707, -0.0406, -0.0135, 0.0115, 0.0378, 0.0714, 0.1276, 0.3506],
])


def empirical_transition() -> np.ndarray:
    """The empirical matrix with rows renormalized to sum to exactly 1."""
    return EMPIRICAL_TRANSITION / EMPIRICAL_TRANSITION.sum(axis=1, keepdims=True)


def default_state_means() -> np.ndarray:
    return EMPIRICAL_MEAN_RETURN.mean(axis=0)


def persistence_transition(diag: float) -> np.ndarray:
    """Chain that stays put with probability ``diag`` and otherwise moves uniformly."""
    off = (1.0 - diag) / (N_STATES - 1)
    m = np.full((N_STATES, N_STATES), off)
    np.fill_diagonal(m, diag)
    return m


@dataclass
class SynthSpec:
    n_stocks: int = 1000
    n_months: int = 120
    transition: np.ndarray = field(default_factory=empirical_transition)
    state_return_means: np.ndarray = field(default_factory=default_state_means)
    return_noise_sd: float = 0.02
    n_features: int = 4
    signal_fidelity: float = 0.3
    seed: int = 0
    start_month: int = 196301
    log_cap_mean: float = 12.0
    log_cap_sd: float = 2.0

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.state_return_means = np.asarray(self.state_return_means, dtype=float)

    def validate(self):
        if self.n_stocks < N_STATES:
            raise ValidationError(f"infeasible rank assignment: n_stocks={self.n_stocks} < {N_STATES}")
        if self.n_months < 1:
            raise ValidationError("n_months must be positive")
        t = self.transition
        if t.shape != (N_STATES, N_STATES) or np.any(t < 0):
            raise ValidationError("transition must be a nonnegative 10x10 matrix")
        if np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-9):
            raise ValidationError("transition rows must sum to 1")
        if self.state_return_means.shape != (N_STATES,):
            raise ValidationError("state_return_means must have 10 entries")
        if self.return_noise_sd < 0:
            raise ValidationError("return_noise_sd must be nonnegative")
        if self.return_noise_sd == 0 and np.any(np.diff(self.state_return_means) <= 0):
            raise ValidationError("zero return noise needs strictly increasing state means")
        if not 0.0 <= self.signal_fidelity <= 1.0:
            raise ValidationError("signal_fidelity must lie in [0, 1]")
        if self.n_features != 0 and self.n_features < 3:
            raise ValidationError("n_features must be 0 or at least 3 (signal pair plus gate)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["transition"] = self.transition.tolist()
        d["state_return_means"] = self.state_return_means.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        t = d.get("transition")
        if isinstance(t, str):
            if t == "empirical":
                d["transition"] = empirical_transition()
            elif t.startswith("persistence:"):
                d["transition"] = persistence_transition(float(t.split(":", 1)[1]))
            else:
                raise ValidationError(f"unknown transition keyword {t!r}")
        m = d.get("state_return_means")
        if isinstance(m, str):
            if m != "empirical":
                raise ValidationError(f"unknown state_return_means keyword {m!r}")
            d["state_return_means"] = default_state_means()
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown synth spec keys: {sorted(extra)}")
        return cls(**d)


def state_counts(n: int, k: int = N_STATES) -> np.ndarray:
    """Members per state that decile labeling assigns to ``n`` distinct returns."""
    edges = (np.arange(k + 1) * n) // k
    return np.diff(edges)


def balanced_transition_step(prev_states, transition, counts, rng) -> np.ndarray:
    """Draw next states from ``transition`` subject to exact per-state ``counts``.

    Stocks are first drawn freely from their transition rows. Over-full states
    then release randomly chosen members, which are redrawn from their own row
    restricted to under-full states; this repeats until every count matches.
    """
    prev = np.asarray(prev_states) - 1
    n = len(prev)
    cum = np.cumsum(transition, axis=1)
    cum[:, -1] = 1.0
    u = rng.random(n)
    nxt = (u[:, None] > cum[prev]).sum(axis=1)
    for _ in range(1000):
        occ = np.bincount(nxt, minlength=N_STATES)
        excess = occ - counts
        if not np.any(excess):
            return nxt + 1
        redraw = []
        for s in np.flatnonzero(excess > 0):
            members = np.flatnonzero(nxt == s)
            redraw.append(rng.choice(members, size=excess[s], replace=False))
        redraw = np.concatenate(redraw)
        occ_after = occ.copy()
        np.subtract.at(occ_after, nxt[redraw], 1)
        open_states = (counts - occ_after) > 0
        w = transition[prev[redraw]] * open_states
        empty = w.sum(axis=1) == 0
        w[empty] = open_states.astype(float)
        w /= w.sum(axis=1, keepdims=True)
        c = np.cumsum(w, axis=1)
        c[:, -1] = 1.0
        nxt[redraw] = (rng.random(len(redraw))[:, None] > c).sum(axis=1)
    raise RuntimeError("balanced transition sampling failed to converge")


def _rank_preserving_returns(states, means, sd, rng):
    """Returns whose within-month deciles equal ``states`` exactly."""
    raw = means[states - 1] + sd * rng.standard_normal(len(states))
    pool = np.sort(raw)
    out = np.empty_like(raw)
    start = 0
    for s in range(1, N_STATES + 1):
        idx = np.flatnonzero(states == s)
        block = pool[start:start + len(idx)]
        out[idx[np.argsort(raw[idx], kind="stable")]] = block
        start += len(idx)
    return out


def generate_panel(spec: SynthSpec) -> Panel:
    """Simulate a balanced panel of ``n_stocks`` over ``n_months`` months."""
    spec.validate()
    n, T = spec.n_stocks, spec.n_months
    root = np.random.SeedSequence(spec.seed)
    chain_ss, ret_ss, feat_ss, cap_ss = root.spawn(4)
    chain_rng = np.random.default_rng(chain_ss)
    ret_rng = np.random.default_rng(ret_ss)
    feat_rng = np.random.default_rng(feat_ss)
    cap_rng = np.random.default_rng(cap_ss)

    counts = state_counts(n)
    states = np.empty((T, n), dtype=np.int8)
    states[0] = chain_rng.permutation(np.repeat(np.arange(1, N_STATES + 1), counts))
    for t in range(1, T):
        states[t] = balanced_transition_step(states[t - 1], spec.transition, counts, chain_rng)

    rets = np.empty((T, n))
    for t in range(T):
        rets[t] = _rank_preserving_returns(states[t], spec.state_return_means, spec.return_noise_sd, ret_rng)
    rets = np.maximum(rets, -0.99)

    cap = np.exp(spec.log_cap_mean + spec.log_cap_sd * cap_rng.standard_normal(n))
    caps_lag = np.empty((T, n))
    for t in range(T):
        caps_lag[t] = cap
        cap = cap * (1.0 + rets[t])

    p = spec.n_features
    feats = np.empty((T, n, p))
    if p:
        gate = feat_rng.random((T, n))
        code = np.where(gate < spec.signal_fidelity,
                        (states - 1 + feat_rng.random((T, n))) / N_STATES,
                        feat_rng.random((T, n)))
        # split 2*code into two coordinates in [0, 1], uniformly along the feasible segment
        total = 2.0 * code
        lo = np.maximum(0.0, total - 1.0)
        hi = np.minimum(1.0, total)
        first = lo + (hi - lo) * feat_rng.random((T, n))
        feats[:, :, 0] = first
        feats[:, :, 1] = total - first
        feats[:, :, 2] = gate
        feats[:, :, 3:] = feat_rng.standard_normal((T, n, p - 3))

    months = ordinal_to_month(month_ordinal(spec.start_month) + np.arange(T))
    width = len(str(n - 1))
    ids = np.array([f"S{i:0{width}d}" for i in range(n)])
    return Panel(np.tile(ids, T), np.repeat(months, n), rets.ravel(), caps_lag.ravel(),
                 feats.reshape(T * n, p), [f"f_{j + 1}" for j in range(p)], states.ravel())
