"""Histogram tree ensembles: gradient boosting (GBM), dropout boosting (DART), random forest (RF).

Features are binned once per fit: a feature with at most ``max_bins`` distinct
values keeps every distinct cut point (exact greedy); wider ones are cut at
``max_bins - 1`` empirical quantiles. Splits send ``x <= threshold`` left.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
from numba import njit

from ..errors import TrainingDivergence, ValidationError
from ..panel import N_STATES, Panel
from .base import EPS, Model, TrainReport, early_stop, softmax, training_arrays

KINDS = ("GBM", "DART", "RF")


@dataclass
class TreeSpec:
    kind: str = "GBM"
    max_depth: int = 4
    n_trees: int = 100
    dropout_rate: float = 0.10
    row_sample_rate: float = 1.0
    col_sample_rate: float = 1.0
    learning_rate: float = 0.1
    seed: int = 0
    reg_lambda: float = 1.0
    min_child_weight: float = 1.0
    max_bins: int = 256
    min_delta: float = 1e-5
    patience: int = 3
    features: tuple | None = None
    name: str = ""

    def __post_init__(self):
        self.kind = str(self.kind).upper()
        if self.features is not None:
            self.features = tuple(self.features)

    def validate(self):
        if self.kind not in KINDS:
            raise ValidationError(f"tree kind must be one of {KINDS}")
        if self.max_depth < 1 or self.n_trees < 1:
            raise ValidationError("max_depth and n_trees must be positive")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ValidationError("dropout_rate must lie in [0, 1]")
        for r in (self.row_sample_rate, self.col_sample_rate):
            if not 0.0 < r <= 1.0:
                raise ValidationError("sample rates must lie in (0, 1]")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if not 2 <= self.max_bins <= 256:
            raise ValidationError("max_bins must lie in 2..256")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"] = list(self.features) if self.features else None
        d["family"] = "trees"
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k != "family"})


# -- binning ------------------------------------------------------------------------


def bin_edges(X, max_bins: int = 256):
    """Per-feature cut points, padded with +inf to shape (p, max_bins - 1)."""
    p = X.shape[1]
    edges = np.full((p, max_bins - 1), np.inf)
    n_cuts = np.zeros(p, dtype=np.int32)
    for j in range(p):
        u = np.unique(X[:, j])
        if len(u) <= max_bins:
            cuts = (u[:-1] + u[1:]) / 2
        else:
            q = np.quantile(X[:, j], np.arange(1, max_bins) / max_bins, method="inverted_cdf")
            cuts = np.unique(q)
            cuts = cuts[cuts < u[-1]]
        edges[j, :len(cuts)] = cuts
        n_cuts[j] = len(cuts)
    return edges, n_cuts


def apply_bins(X, edges, n_cuts):
    Xb = np.empty(X.shape, dtype=np.uint8)
    for j in range(X.shape[1]):
        Xb[:, j] = np.searchsorted(edges[j, :n_cuts[j]], X[:, j], side="left")
    return Xb


# -- numba kernels ----------------------------------------------------------------------


@njit(cache=True)
def _partition(idx, s, e, Xb, f, b, buf):
    """Stable in-place partition of idx[s:e] by Xb[:, f] <= b; returns the split point."""
    nl = 0
    nr = 0
    for ii in range(s, e):
        r = idx[ii]
        if Xb[r, f] <= b:
            idx[s + nl] = r
            nl += 1
        else:
            buf[nr] = r
            nr += 1
    for k in range(nr):
        idx[s + nl + k] = buf[k]
    return s + nl


@njit(cache=True)
def _node_histogram(Xb, idx, s, e, g, h, feats, Gh, Hh):
    Gh[:, :] = 0.0
    Hh[:, :] = 0.0
    for ii in range(s, e):
        r = idx[ii]
        gr = g[r]
        hr = h[r]
        for fj in range(len(feats)):
            bb = Xb[r, feats[fj]]
            Gh[fj, bb] += gr
            Hh[fj, bb] += hr


@njit(cache=True)
def _grow_boost(Xb, rows, g, h, feats, n_cuts, max_depth, lam, min_child_weight, leaf_out):
    """Grow one second-order regression tree on gradients ``g`` and hessians ``h``.

    Histograms of the larger child are obtained by subtracting the smaller
    child's from the parent's. The leaf value of every row in ``rows`` is
    written to ``leaf_out``. Returns (feature, bin_threshold, left, right,
    value, gain); feature -1 marks a leaf.
    """
    max_nodes = 2 ** (max_depth + 1) - 1
    feat = np.full(max_nodes, -1, np.int32)
    thr = np.zeros(max_nodes, np.int32)
    left = np.full(max_nodes, -1, np.int32)
    right = np.full(max_nodes, -1, np.int32)
    value = np.zeros(max_nodes)
    gain = np.zeros(max_nodes)
    start = np.zeros(max_nodes, np.int64)
    stop = np.zeros(max_nodes, np.int64)
    depth = np.zeros(max_nodes, np.int64)
    Gtot = np.zeros(max_nodes)
    Htot = np.zeros(max_nodes)
    idx = rows.copy()
    buf = np.empty(len(idx), idx.dtype)
    nf = len(feats)
    # histogram slots are recycled: only nodes awaiting a split hold one
    n_slots = 2 * max_depth + 4
    Gh = np.empty((n_slots, nf, 256))
    Hh = np.empty((n_slots, nf, 256))
    free = np.arange(n_slots)[::-1].copy()
    n_free = n_slots
    slot = np.full(max_nodes, -1, np.int64)
    stack = np.empty(max_nodes, np.int64)
    stop[0] = len(idx)
    for ii in range(len(idx)):
        Gtot[0] += g[idx[ii]]
        Htot[0] += h[idx[ii]]
    n_free -= 1
    slot[0] = free[n_free]
    _node_histogram(Xb, idx, 0, len(idx), g, h, feats, Gh[slot[0]], Hh[slot[0]])
    stack[0] = 0
    sp = 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        nd = stack[sp]
        s = start[nd]
        e = stop[nd]
        G = Gtot[nd]
        H = Htot[nd]
        value[nd] = -G / (H + lam)
        splittable = depth[nd] < max_depth and e - s >= 2
        bf = -1
        bbin = 0
        best = 1e-12
        bGL = 0.0
        bHL = 0.0
        hs = slot[nd]
        if splittable:
            parent = G * G / (H + lam)
            for fj in range(nf):
                GL = 0.0
                HL = 0.0
                for bb in range(n_cuts[feats[fj]]):
                    GL += Gh[hs, fj, bb]
                    HL += Hh[hs, fj, bb]
                    HR = H - HL
                    if HL < min_child_weight or HR < min_child_weight:
                        continue
                    GR = G - GL
                    cand = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent)
                    if cand > best:
                        best = cand
                        bf = fj
                        bbin = bb
                        bGL = GL
                        bHL = HL
        mid = s
        if bf >= 0:
            mid = _partition(idx, s, e, Xb, feats[bf], bbin, buf)
        if bf < 0 or mid == s or mid == e:
            for ii in range(s, e):
                leaf_out[idx[ii]] = value[nd]
            if hs >= 0:
                free[n_free] = hs
                n_free += 1
            continue
        feat[nd] = feats[bf]
        thr[nd] = bbin
        gain[nd] = best
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[nd] = lc
        right[nd] = rc
        start[lc] = s
        stop[lc] = mid
        start[rc] = mid
        stop[rc] = e
        depth[lc] = depth[rc] = depth[nd] + 1
        Gtot[lc] = bGL
        Htot[lc] = bHL
        Gtot[rc] = G - bGL
        Htot[rc] = H - bHL
        if depth[nd] + 1 < max_depth:
            small, large = (lc, rc) if mid - s <= e - mid else (rc, lc)
            n_free -= 1
            slot[small] = free[n_free]
            _node_histogram(Xb, idx, start[small], stop[small], g, h, feats, Gh[slot[small]], Hh[slot[small]])
            # the larger child reuses the parent's slot
            slot[large] = hs
            Gh[hs] -= Gh[slot[small]]
            Hh[hs] -= Hh[slot[small]]
        else:
            free[n_free] = hs
            n_free += 1
        stack[sp] = rc
        stack[sp + 1] = lc
        sp += 2
    return feat[:n_nodes], thr[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes], gain[:n_nodes]


@njit(cache=True)
def _softmax_grad(F, y, g, h):
    """Fill class-major gradients/hessians of softmax cross-entropy; return the loss in bits."""
    n, K = F.shape
    loss = 0.0
    p = np.empty(K)
    for i in range(n):
        m = F[i, 0]
        for k in range(1, K):
            if F[i, k] > m:
                m = F[i, k]
        z = 0.0
        for k in range(K):
            p[k] = math.exp(F[i, k] - m)
            z += p[k]
        for k in range(K):
            pk = p[k] / z
            g[k, i] = pk - (1.0 if k == y[i] else 0.0)
            h[k, i] = max(pk * (1.0 - pk), 1e-16)
        loss -= math.log2(max(p[y[i]] / z, 1e-12))
    return loss / n


@njit(cache=True)
def _entropy_bits(counts, n):
    if n <= 0:
        return 0.0
    acc = 0.0
    for c in counts:
        if c > 0:
            acc -= c * math.log2(c / n)
    return acc


@njit(cache=True)
def _grow_forest_tree(Xb, rows, y, n_cuts, max_depth, mtry, feat_keys):
    """Grow one classification tree maximizing information gain (bits).

    Each node considers the ``mtry`` features with the smallest ``feat_keys[node]``.
    Leaves hold class frequency vectors.
    """
    p = Xb.shape[1]
    K = 10
    max_nodes = 2 ** (max_depth + 1) - 1
    feat = np.full(max_nodes, -1, np.int32)
    thr = np.zeros(max_nodes, np.int32)
    left = np.full(max_nodes, -1, np.int32)
    right = np.full(max_nodes, -1, np.int32)
    value = np.zeros((max_nodes, K))
    gain = np.zeros(max_nodes)
    start = np.zeros(max_nodes, np.int64)
    stop = np.zeros(max_nodes, np.int64)
    depth = np.zeros(max_nodes, np.int64)
    idx = rows.copy()
    buf = np.empty(len(idx), idx.dtype)
    Ch = np.zeros((mtry, 256, K))
    tot = np.zeros(K)
    cl = np.zeros(K)
    cr = np.zeros(K)
    stack = np.empty(max_nodes, np.int64)
    stop[0] = len(idx)
    stack[0] = 0
    sp = 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        nd = stack[sp]
        s = start[nd]
        e = stop[nd]
        n = e - s
        tot[:] = 0.0
        for ii in range(s, e):
            tot[y[idx[ii]]] += 1.0
        for k in range(K):
            value[nd, k] = tot[k] / n
        h_parent = _entropy_bits(tot, n)
        if depth[nd] >= max_depth or n < 2 or h_parent <= 0.0:
            continue
        feats = np.argsort(feat_keys[nd])[:mtry]
        Ch[:, :, :] = 0.0
        for ii in range(s, e):
            r = idx[ii]
            yr = y[r]
            for fj in range(mtry):
                Ch[fj, Xb[r, feats[fj]], yr] += 1.0
        best = 1e-12
        bf = -1
        bbin = 0
        for fj in range(mtry):
            cl[:] = 0.0
            nl = 0.0
            for bb in range(n_cuts[feats[fj]]):
                for k in range(K):
                    cl[k] += Ch[fj, bb, k]
                    nl += Ch[fj, bb, k]
                if nl == 0.0 or nl == n:
                    continue
                for k in range(K):
                    cr[k] = tot[k] - cl[k]
                cand = h_parent - _entropy_bits(cl, nl) - _entropy_bits(cr, n - nl)
                if cand > best:
                    best = cand
                    bf = feats[fj]
                    bbin = bb
        if bf < 0:
            continue
        mid = _partition(idx, s, e, Xb, bf, bbin, buf)
        feat[nd] = bf
        thr[nd] = bbin
        gain[nd] = best
        for child in range(2):
            c = n_nodes
            n_nodes += 1
            if child == 0:
                start[c] = s
                stop[c] = mid
                left[nd] = c
            else:
                start[c] = mid
                stop[c] = e
                right[nd] = c
            depth[c] = depth[nd] + 1
            stack[sp] = c
            sp += 1
    return feat[:n_nodes], thr[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes], gain[:n_nodes]


@njit(cache=True)
def _leaf_values_binned(Xb, feat, thr, left, right, value):
    """Scalar leaf value reached by every row of a binned matrix (single tree)."""
    n = Xb.shape[0]
    out = np.empty(n)
    for i in range(n):
        nd = 0
        while feat[nd] >= 0:
            if Xb[i, feat[nd]] <= thr[nd]:
                nd = left[nd]
            else:
                nd = right[nd]
        out[i] = value[nd]
    return out


@njit(cache=True)
def _leaf_rows_binned(Xb, feat, thr, left, right, value):
    n = Xb.shape[0]
    out = np.empty((n, value.shape[1]))
    for i in range(n):
        nd = 0
        while feat[nd] >= 0:
            if Xb[i, feat[nd]] <= thr[nd]:
                nd = left[nd]
            else:
                nd = right[nd]
        out[i] = value[nd]
    return out


@njit(cache=True)
def _predict_raw(X, feat, thr, left, right, value, offsets, tree_class, tree_weight, out):
    """Accumulate weighted leaf values of every tree into ``out`` (n, 10).

    ``value`` has one column (boosting: added to ``out[:, tree_class]``) or ten
    (forest: added to the whole row).
    """
    n = X.shape[0]
    T = len(offsets) - 1
    vec = value.shape[1] > 1
    for i in range(n):
        for t in range(T):
            base = offsets[t]
            nd = base
            while feat[nd] >= 0:
                if X[i, feat[nd]] <= thr[nd]:
                    nd = base + left[nd]
                else:
                    nd = base + right[nd]
            w = tree_weight[t]
            if vec:
                for k in range(value.shape[1]):
                    out[i, k] += w * value[nd, k]
            else:
                out[i, tree_class[t]] += w * value[nd, 0]


# -- model ------------------------------------------------------------------------------


class TreeEnsembleModel(Model):
    """Flattened ensemble. Thresholds are raw feature values; children are tree-local indices."""

    kind = "trees"

    def __init__(self, spec: TreeSpec, feature_names, trees, init_score, report=None, name=""):
        super().__init__(spec, feature_names, report, name)
        self.init_score = np.asarray(init_score, dtype=float)
        self._pack(trees)

    def _pack(self, trees):
        # trees: list of dicts(feat, thr, left, right, value(2-D), gain, cls, weight)
        self.offsets = np.zeros(len(trees) + 1, dtype=np.int64)
        for t, tr in enumerate(trees):
            self.offsets[t + 1] = self.offsets[t] + len(tr["feat"])
        cat = lambda k: np.concatenate([tr[k] for tr in trees]) if trees else np.empty(0)
        self.feat = cat("feat").astype(np.int32)
        self.thr = cat("thr").astype(float)
        self.left = cat("left").astype(np.int32)
        self.right = cat("right").astype(np.int32)
        width = trees[0]["value"].shape[1] if trees else 1
        self.value = (np.concatenate([tr["value"] for tr in trees]) if trees else np.empty((0, width))).astype(float)
        self.gain = cat("gain").astype(float)
        self.tree_class = np.array([tr["cls"] for tr in trees], dtype=np.int64)
        self.tree_weight = np.array([tr["weight"] for tr in trees], dtype=float)

    @property
    def n_trees(self) -> int:
        return len(self.tree_class)

    def tree_depths(self) -> np.ndarray:
        depths = []
        for t in range(self.n_trees):
            a, b = self.offsets[t], self.offsets[t + 1]
            d = np.zeros(b - a, dtype=int)
            for nd in range(b - a):
                if self.feat[a + nd] >= 0:
                    d[self.left[a + nd]] = d[self.right[a + nd]] = d[nd] + 1
            depths.append(d.max() if len(d) else 0)
        return np.array(depths)

    def raw_scores(self, X) -> np.ndarray:
        out = np.tile(self.init_score, (len(X), 1))
        _predict_raw(np.ascontiguousarray(X, dtype=float), self.feat, self.thr, self.left, self.right,
                     self.value, self.offsets, self.tree_class, self.tree_weight, out)
        return out

    def _proba(self, X):
        raw = self.raw_scores(X)
        if self.spec.kind == "RF":
            return raw / raw.sum(axis=1, keepdims=True)
        return softmax(raw)

    def feature_importance(self) -> np.ndarray:
        """Summed split gain per feature over every tree."""
        imp = np.zeros(self.n_features)
        split = self.feat >= 0
        np.add.at(imp, self.feat[split], self.gain[split])
        return imp

    def _arrays(self):
        return {k: getattr(self, k) for k in ("offsets", "feat", "thr", "left", "right", "value",
                                              "gain", "tree_class", "tree_weight", "init_score")}

    @classmethod
    def from_arrays(cls, meta, arrays, report):
        obj = cls.__new__(cls)
        Model.__init__(obj, TreeSpec.from_dict(meta["spec"]), meta["feature_names"], report, meta["name"])
        for k, v in arrays.items():
            setattr(obj, k, v)
        return obj


def _check_classes(y):
    counts = np.bincount(y, minlength=N_STATES)
    if np.any(counts == 0):
        missing = (np.flatnonzero(counts == 0) + 1).tolist()
        raise ValidationError(f"states {missing} absent from the training set; refusing to train")
    return counts


def _ce_bits(F, y, is_prob=False):
    P = F if is_prob else softmax(F)
    return float(-np.mean(np.log2(np.maximum(P[np.arange(len(y)), y], EPS))))


def _tree_dict(raw, edges, cls, weight, vec=False):
    feat, thr_bin, left, right, value, gain = raw
    thr = np.where(feat >= 0, edges[np.maximum(feat, 0), thr_bin], 0.0)
    return {"feat": feat, "thr": thr, "left": left, "right": right,
            "value": value if vec else value[:, None], "gain": gain, "cls": cls, "weight": weight}


def train_tree_ensemble(spec: TreeSpec, train: Panel) -> TreeEnsembleModel:
    spec.validate()
    X, y = training_arrays(train)
    _check_classes(y)
    edges, n_cuts = bin_edges(X, spec.max_bins)
    Xb = apply_bins(X, edges, n_cuts)
    if spec.kind == "RF":
        return _fit_forest(spec, train.feature_names, Xb, y, edges, n_cuts)
    return _fit_boosting(spec, train.feature_names, Xb, y, edges, n_cuts)


def _fit_boosting(spec, names, Xb, y, edges, n_cuts):
    n, p = Xb.shape
    ss = np.random.SeedSequence(spec.seed)
    row_rng, col_rng, drop_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    prior = np.bincount(y, minlength=N_STATES) / n
    init = np.log(prior)
    F = np.tile(init, (n, 1))
    g = np.empty((N_STATES, n))
    h = np.empty((N_STATES, n))
    y32 = y.astype(np.int64)
    n_rows = max(1, int(round(spec.row_sample_rate * n)))
    n_cols = max(1, int(round(spec.col_sample_rate * p)))
    all_rows = np.arange(n, dtype=np.int64)
    leaf = np.empty(n)
    trees, rounds = [], []  # rounds[r] lists the tree indices grown in round r
    report = TrainReport()
    dart = spec.kind == "DART"
    _softmax_grad(F, y32, g, h)  # g, h always hold the gradients at F between rounds

    def contribution(tr):
        return _leaf_values_binned(Xb, tr["feat"], tr["bin"], tr["left"], tr["right"], tr["value"][:, 0])

    for r in range(1, spec.n_trees + 1):
        dropped = []
        if dart and rounds:
            dropped = [k for k in range(len(rounds)) if drop_rng.random() < spec.dropout_rate]
        kd = len(dropped)
        if kd:
            D = np.zeros_like(F)
            for k in dropped:
                for t in rounds[k]:
                    D[:, trees[t]["cls"]] += trees[t]["weight"] * contribution(trees[t])
            base = F - D
            _softmax_grad(base, y32, g, h)
        else:
            base = F
        rows = all_rows if n_rows == n else np.sort(row_rng.choice(n, n_rows, replace=False))
        w_new = 1.0 / (kd + 1)
        new_contrib = np.zeros_like(F)
        round_idx = []
        for c in range(N_STATES):
            feats = np.arange(p) if n_cols == p else np.sort(col_rng.choice(p, n_cols, replace=False))
            raw = _grow_boost(Xb, rows, g[c], h[c], feats.astype(np.int64), n_cuts,
                              spec.max_depth, spec.reg_lambda, spec.min_child_weight, leaf)
            tr = _tree_dict(raw, edges, c, w_new)
            tr["value"] = tr["value"] * spec.learning_rate
            tr["bin"] = raw[1]
            if n_rows == n:
                new_contrib[:, c] = (w_new * spec.learning_rate) * leaf
            else:
                new_contrib[:, c] = w_new * contribution(tr)
            round_idx.append(len(trees))
            trees.append(tr)
        if kd:
            scale = kd / (kd + 1.0)
            for k in dropped:
                for t in rounds[k]:
                    trees[t]["weight"] *= scale
            F = base + scale * D + new_contrib
        else:
            F += new_contrib
        rounds.append(round_idx)
        loss = _softmax_grad(F, y32, g, h)
        if not math.isfinite(loss):
            raise TrainingDivergence(r, loss)
        report.loss_by_round.append(loss)
        report.rounds_run = r
        if early_stop(report.loss_by_round, spec.min_delta, spec.patience) is not None:
            report.stopped_early = True
            break
    for tr in trees:
        tr.pop("bin", None)
    return TreeEnsembleModel(spec, names, trees, init, report)


def _fit_forest(spec, names, Xb, y, edges, n_cuts):
    n, p = Xb.shape
    rng = np.random.default_rng(spec.seed)
    n_rows = max(1, int(round(spec.row_sample_rate * n)))
    mtry = max(1, int(round(spec.col_sample_rate * p)))
    max_nodes = 2 ** (spec.max_depth + 1) - 1
    trees = []
    acc = np.zeros((n, N_STATES))
    report = TrainReport()
    for t in range(1, spec.n_trees + 1):
        rows = np.sort(rng.integers(0, n, size=n_rows))
        keys = rng.random((max_nodes, p))
        raw = _grow_forest_tree(Xb, rows.astype(np.int64), y, n_cuts, spec.max_depth, mtry, keys)
        tr = _tree_dict(raw, edges, -1, 1.0 / spec.n_trees, vec=True)
        acc += _leaf_rows_binned(Xb, raw[0], raw[1], raw[2], raw[3], raw[4])
        trees.append(tr)
        report.loss_by_round.append(_ce_bits(acc / t, y, is_prob=True))
        report.rounds_run = t
    for tr in trees:
        tr["cls"] = 0
    return TreeEnsembleModel(spec, names, trees, np.zeros(N_STATES), report)
