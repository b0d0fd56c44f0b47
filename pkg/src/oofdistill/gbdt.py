"""Histogram gradient-boosted tree student.

The distillation objective enters tree training through its reduction to
per-class regression: targets are centered log-probabilities of the
alpha-mixture of tempered teacher labels and (possibly smoothed) one-hot
labels, and the per-sample confidence weights become sample weights. Each
boosting round fits one depth-limited regression tree per class on the
weighted residuals; prediction applies a row-wise softmax to the summed
scores.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is expected but not required
    njit = None

from .labeling import SoftLabelSet
from .losses import LossConfig, smooth_target, temper
from .util import derive_seed, softmax, stratified_holdout

_GAIN_EPS = 1e-12
_FORMAT = "oofdistill-gbdt"
_VERSION = 1

if njit is not None:

    @njit(cache=True)
    def _traverse_packed(X, feat, thr, left, right, val, roots, class_of,
                         max_depth, out):  # pragma: no cover - compiled
        for i in range(X.shape[0]):
            for t in range(roots.shape[0]):
                node = roots[t]
                f = feat[node]
                depth = 0
                while f >= 0 and depth < max_depth:
                    if X[i, f] <= thr[node]:
                        node = left[node]
                    else:
                        node = right[node]
                    f = feat[node]
                    depth += 1
                out[i, class_of[t]] += val[node]
else:
    _traverse_packed = None


class GbdtError(ValueError):
    pass


@dataclass(frozen=True)
class GbdtConfig:
    n_rounds: int = 300
    max_depth: int = 6
    learning_rate: float = 0.1
    patience: int = 30
    val_fraction: float = 0.10
    min_samples_leaf: int = 5
    histogram_bins: int = 64
    seed: int = 0
    use_sample_weights: bool = True

    def validate(self) -> None:
        if self.n_rounds < 1 or self.max_depth < 1 or self.patience < 1:
            raise GbdtError("n_rounds, max_depth, and patience must be positive")
        if not 0.0 < self.learning_rate <= 1.0:
            raise GbdtError(f"learning_rate must be in (0, 1], got {self.learning_rate}")
        if not 0.0 < self.val_fraction < 0.5:
            raise GbdtError(f"val_fraction must be in (0, 0.5), got {self.val_fraction}")
        if self.min_samples_leaf < 1:
            raise GbdtError("min_samples_leaf must be >= 1")
        if not 2 <= self.histogram_bins <= 256:
            raise GbdtError("histogram_bins must be in [2, 256]")


@dataclass
class Tree:
    """Array-of-nodes regression tree. Leaves have feature == -1 and
    self-loop through left/right so fixed-depth traversal stays put."""

    feature: np.ndarray
    threshold: np.ndarray
    bin: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_stump(self, tol: float = 1e-12) -> bool:
        return self.n_nodes == 1 and abs(float(self.value[0])) <= tol

    def predict_binned(self, codes: np.ndarray, max_depth: int) -> np.ndarray:
        node = np.zeros(len(codes), dtype=np.int64)
        rows = np.arange(len(codes))
        for _ in range(max_depth):
            f = self.feature[node]
            leaf = f < 0
            fs = np.where(leaf, 0, f)
            go_left = codes[rows, fs] <= self.bin[node]
            nxt = np.where(go_left, self.left[node], self.right[node])
            node = np.where(leaf, node, nxt)
        return self.value[node]


@dataclass
class TreeEnsemble:
    """Fitted boosted ensemble: `trees[round][class]`, plus softmax readout."""

    trees: list
    base_scores: np.ndarray
    learning_rate: float
    max_depth: int
    n_rounds: int
    n_features: int
    n_classes: int
    degenerate: bool = False
    train_mse_: list = field(default_factory=list, repr=False)
    val_mse_: list = field(default_factory=list, repr=False)
    best_round_: int = 0
    rounds_trained_: int = 0

    def __post_init__(self):
        self._packed = None

    def _pack(self):
        if self._packed is not None:
            return self._packed
        flat = [t for rnd in self.trees for t in rnd]
        if not flat:
            self._packed = ()
            return self._packed
        sizes = np.array([t.n_nodes for t in flat], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        feat = np.concatenate([t.feature for t in flat]).astype(np.int64)
        thr = np.concatenate([t.threshold for t in flat])
        left = np.concatenate([t.left.astype(np.int64) + o for t, o in zip(flat, offsets)])
        right = np.concatenate([t.right.astype(np.int64) + o for t, o in zip(flat, offsets)])
        val = np.concatenate([t.value for t in flat])
        class_of = np.tile(np.arange(self.n_classes, dtype=np.int64), len(self.trees))
        indicator = np.zeros((len(flat), self.n_classes))
        indicator[np.arange(len(flat)), class_of] = 1.0
        self._packed = (feat, thr, left, right, val, offsets, class_of, indicator)
        return self._packed

    def raw_scores(self, X: np.ndarray, chunk: int = 64) -> np.ndarray:
        """Summed per-class scores before the softmax readout.

        Uses a compiled single-threaded traversal when numba is available;
        otherwise a cache-sized vectorized pointer chase.
        """
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise GbdtError(f"feature matrix {X.shape} does not match d={self.n_features}")
        packed = self._pack()
        if not packed:
            return np.tile(self.base_scores, (len(X), 1))
        feat, thr, left, right, val, offsets, class_of, indicator = packed
        if _traverse_packed is not None:
            out = np.zeros((len(X), self.n_classes))
            _traverse_packed(X, feat, thr, left, right, val, offsets, class_of,
                             self.max_depth, out)
            return self.base_scores + self.learning_rate * out
        out = np.tile(self.base_scores, (len(X), 1))
        for start in range(0, len(X), chunk):
            Xc = X[start:start + chunk]
            nc = len(Xc)
            node = np.broadcast_to(offsets, (nc, len(offsets))).copy()
            rows = np.arange(nc)[:, None]
            for _ in range(self.max_depth):
                f = feat[node]
                leaf = f < 0
                fs = np.where(leaf, 0, f)
                go_left = Xc[rows, fs] <= thr[node]
                nxt = np.where(go_left, left[node], right[node])
                node = np.where(leaf, node, nxt)
            out[start:start + nc] += self.learning_rate * (val[node] @ indicator)
        return out


def _make_edges(X: np.ndarray, bins: int) -> list:
    """Per-feature split candidate values (bin upper boundaries)."""
    edges = []
    for f in range(X.shape[1]):
        uniq = np.unique(X[:, f])
        if len(uniq) <= 1:
            edges.append(np.empty(0, dtype=np.float64))
        elif len(uniq) <= bins:
            edges.append((uniq[:-1] + uniq[1:]) / 2.0)
        else:
            qs = np.quantile(X[:, f], np.arange(1, bins) / bins)
            edges.append(np.unique(qs))
    return edges


def _bin_codes(X: np.ndarray, edges: list) -> np.ndarray:
    codes = np.empty(X.shape, dtype=np.int32)
    for f, e in enumerate(edges):
        codes[:, f] = np.searchsorted(e, X[:, f], side="left")
    return codes


def _grow_tree(codes: np.ndarray, r: np.ndarray, w: np.ndarray,
               edges: list, config: GbdtConfig) -> Tree:
    """Level-wise histogram tree on weighted residuals.

    Split gain is weighted variance reduction: sum_child (S_c^2 / W_c) minus
    the parent term, with S = sum(w*r) and W = sum(w). Leaf values are the
    weighted mean residual of their samples.
    """
    n, d = codes.shape
    B = config.histogram_bins
    min_leaf = config.min_samples_leaf
    wr = w * r

    feature = [-1]
    bin_idx = [-1]
    threshold = [0.0]
    left = [0]
    right = [0]
    node_of = np.zeros(n, dtype=np.int64)
    open_ids = [0]

    for _ in range(config.max_depth):
        if not open_ids:
            break
        open_arr = np.asarray(open_ids, dtype=np.int64)
        mask = np.isin(node_of, open_arr)
        active = np.flatnonzero(mask)
        if active.size == 0:
            break
        slot = np.searchsorted(open_arr, node_of[active])
        n_open = len(open_arr)

        keys = (slot[:, None] * (d * B)
                + np.arange(d, dtype=np.int64)[None, :] * B
                + codes[active]).ravel()
        size = n_open * d * B
        hist_wr = np.bincount(keys, weights=np.repeat(wr[active], d), minlength=size)
        hist_w = np.bincount(keys, weights=np.repeat(w[active], d), minlength=size)
        hist_c = np.bincount(keys, minlength=size).astype(np.int64)

        cwr = np.cumsum(hist_wr.reshape(n_open, d, B), axis=2)
        cw = np.cumsum(hist_w.reshape(n_open, d, B), axis=2)
        cc = np.cumsum(hist_c.reshape(n_open, d, B), axis=2)
        pwr = cwr[:, :, -1:]
        pw = cw[:, :, -1:]
        pc = cc[:, :, -1:]
        rwr = pwr - cwr
        rw = pw - cw
        rc = pc - cc
        valid = (cc >= min_leaf) & (rc >= min_leaf) & (cw > 0) & (rw > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = (cwr**2 / np.where(cw > 0, cw, 1.0)
                    + rwr**2 / np.where(rw > 0, rw, 1.0)
                    - pwr**2 / np.where(pw > 0, pw, 1.0))
        gain = np.where(valid, gain, -np.inf)
        flat = gain.reshape(n_open, d * B)
        best = flat.argmax(axis=1)
        best_gain = flat[np.arange(n_open), best]

        split_f = np.full(n_open, -1, dtype=np.int64)
        split_b = np.full(n_open, -1, dtype=np.int64)
        left_id = np.full(n_open, -1, dtype=np.int64)
        right_id = np.full(n_open, -1, dtype=np.int64)
        new_open = []
        for o, nid in enumerate(open_arr):
            if not np.isfinite(best_gain[o]) or best_gain[o] <= _GAIN_EPS:
                continue
            f, b = divmod(int(best[o]), B)
            lid = len(feature)
            rid = lid + 1
            for arrays, leaf_vals in ((feature, -1), (bin_idx, -1)):
                arrays.extend([leaf_vals, leaf_vals])
            threshold.extend([0.0, 0.0])
            left.extend([lid, rid])
            right.extend([lid, rid])
            feature[nid] = f
            bin_idx[nid] = b
            threshold[nid] = float(edges[f][b])
            left[nid] = lid
            right[nid] = rid
            split_f[o] = f
            split_b[o] = b
            left_id[o] = lid
            right_id[o] = rid
            new_open.extend([lid, rid])

        has_split = split_f[slot] >= 0
        fs = np.where(has_split, split_f[slot], 0)
        go_left = codes[active, fs] <= split_b[slot]
        routed = np.where(go_left, left_id[slot], right_id[slot])
        node_of[active] = np.where(has_split, routed, node_of[active])
        open_ids = new_open

    n_nodes = len(feature)
    sum_wr = np.bincount(node_of, weights=wr, minlength=n_nodes)
    sum_w = np.bincount(node_of, weights=w, minlength=n_nodes)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.where(sum_w > 0, sum_wr / np.where(sum_w > 0, sum_w, 1.0), 0.0)
    feat_arr = np.asarray(feature, dtype=np.int32)
    value = np.where(feat_arr < 0, value, 0.0)
    return Tree(
        feature=feat_arr,
        threshold=np.asarray(threshold, dtype=np.float64),
        bin=np.asarray(bin_idx, dtype=np.int32),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        value=value,
    )


def soft_logit_targets(labels: SoftLabelSet, config: LossConfig,
                       hard_labels: np.ndarray) -> np.ndarray:
    """Per-class regression targets: centered logs of the alpha-mixture
    m = alpha * temper(p, T) + (1 - alpha) * smoothed-one-hot(y)."""
    config.validate()
    y = np.asarray(hard_labels, dtype=np.int64)
    C = labels.n_classes
    if len(y) != labels.n_rows:
        raise GbdtError("hard labels do not align with soft-label rows")
    m = np.zeros_like(labels.probs)
    if config.alpha > 0.0:
        if labels.temperature is None:
            raise GbdtError("soft labels are missing annotations; call annotate() first")
        m += config.alpha * temper(labels.probs, labels.temperature, config.epsilon_floor)
    if config.alpha < 1.0:
        m += (1.0 - config.alpha) * smooth_target(y, C, config.label_smoothing)
    lm = np.log(np.maximum(m, config.epsilon_floor))
    return lm - lm.mean(axis=1, keepdims=True)


def _weighted_mse(diff: np.ndarray, w: np.ndarray) -> float:
    return float(np.sum(w[:, None] * diff**2) / (np.sum(w) * diff.shape[1]))


def _canonical_order(features, targets, weights, strat) -> np.ndarray:
    """Content-based row order so fitting is invariant to input permutation."""
    blob = np.ascontiguousarray(
        np.hstack([features, targets, weights[:, None], strat[:, None].astype(np.float64)])
    )
    keys = [blob[i].tobytes() for i in range(len(blob))]
    return np.asarray(sorted(range(len(keys)), key=keys.__getitem__), dtype=np.int64)


def fit_gbdt(features: np.ndarray, targets: np.ndarray, sample_weights: np.ndarray,
             config: GbdtConfig, hard_labels: np.ndarray | None = None) -> TreeEnsemble:
    """Boost per-class histogram trees on weighted residuals.

    Early stopping watches weighted MSE on a stratified held-out split
    (stratified by `hard_labels` when given, else by target argmax) and
    restores the best round count once `patience` rounds pass without
    improvement.
    """
    config.validate()
    X = np.asarray(features, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if Y.ndim != 2 or len(X) != len(Y):
        raise GbdtError("targets must be an (N, C) matrix aligned with features")
    n, d = X.shape
    C = Y.shape[1]
    if n < 20:
        raise GbdtError(f"need at least 20 rows to fit, got {n}")
    w = (np.asarray(sample_weights, dtype=np.float64)
         if config.use_sample_weights else np.ones(n))
    if w.shape != (n,) or np.any(w <= 0):
        raise GbdtError("sample weights must be positive and aligned with rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y)) and np.all(np.isfinite(w))):
        raise GbdtError("features, targets, and weights must be finite")
    strat = (np.asarray(hard_labels, dtype=np.int64)
             if hard_labels is not None else Y.argmax(axis=1))

    order = _canonical_order(X, Y, w, strat)
    X, Y, w, strat = X[order], Y[order], w[order], strat[order]

    tr_idx, val_idx = stratified_holdout(strat, config.val_fraction,
                                         derive_seed(config.seed, "gbdt-val"))
    if val_idx.size == 0 or tr_idx.size == 0:
        raise GbdtError("validation split is degenerate")
    X_tr, Y_tr, w_tr = X[tr_idx], Y[tr_idx], w[tr_idx]
    X_val, Y_val, w_val = X[val_idx], Y[val_idx], w[val_idx]

    edges = _make_edges(X_tr, config.histogram_bins)
    codes_tr = _bin_codes(X_tr, edges)
    codes_val = _bin_codes(X_val, edges)

    base = np.average(Y_tr, axis=0, weights=w_tr)
    pred_tr = np.tile(base, (len(X_tr), 1))
    pred_val = np.tile(base, (len(X_val), 1))

    trees: list[list[Tree]] = []
    train_hist: list[float] = []
    val_hist: list[float] = []
    best_val = _weighted_mse(Y_val - pred_val, w_val)
    best_round = 0
    lr = config.learning_rate
    for rnd in range(config.n_rounds):
        resid = Y_tr - pred_tr
        round_trees = [_grow_tree(codes_tr, resid[:, c], w_tr, edges, config)
                       for c in range(C)]
        if all(t.is_stump() for t in round_trees):
            break
        for c, t in enumerate(round_trees):
            pred_tr[:, c] += lr * t.predict_binned(codes_tr, config.max_depth)
            pred_val[:, c] += lr * t.predict_binned(codes_val, config.max_depth)
        trees.append(round_trees)
        train_hist.append(_weighted_mse(Y_tr - pred_tr, w_tr))
        val_hist.append(_weighted_mse(Y_val - pred_val, w_val))
        if val_hist[-1] < best_val:
            best_val = val_hist[-1]
            best_round = rnd + 1
        if (rnd + 1) - best_round >= config.patience:
            break

    kept = trees[:best_round]
    return TreeEnsemble(
        trees=kept,
        base_scores=base,
        learning_rate=lr,
        max_depth=config.max_depth,
        n_rounds=best_round,
        n_features=d,
        n_classes=C,
        degenerate=(best_round == 0),
        train_mse_=train_hist,
        val_mse_=val_hist,
        best_round_=best_round,
        rounds_trained_=len(trees),
    )


def predict_gbdt(model: TreeEnsemble, features: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the summed per-class tree scores."""
    return softmax(model.raw_scores(np.asarray(features, dtype=np.float64)))


def save_gbdt(model: TreeEnsemble, path) -> None:
    doc = {
        "format": _FORMAT,
        "version": _VERSION,
        "learning_rate": model.learning_rate,
        "base_scores": model.base_scores.tolist(),
        "max_depth": model.max_depth,
        "n_rounds": model.n_rounds,
        "n_features": model.n_features,
        "n_classes": model.n_classes,
        "degenerate": model.degenerate,
        "trees": [
            [
                {
                    "feature": t.feature.tolist(),
                    "threshold": t.threshold.tolist(),
                    "bin": t.bin.tolist(),
                    "left": t.left.tolist(),
                    "right": t.right.tolist(),
                    "value": t.value.tolist(),
                }
                for t in rnd
            ]
            for rnd in model.trees
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_gbdt(path) -> TreeEnsemble:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != _FORMAT or doc.get("version") != _VERSION:
        raise GbdtError(f"{path}: not a {_FORMAT} v{_VERSION} file")
    trees = [
        [
            Tree(
                feature=np.asarray(t["feature"], dtype=np.int32),
                threshold=np.asarray(t["threshold"], dtype=np.float64),
                bin=np.asarray(t["bin"], dtype=np.int32),
                left=np.asarray(t["left"], dtype=np.int32),
                right=np.asarray(t["right"], dtype=np.int32),
                value=np.asarray(t["value"], dtype=np.float64),
            )
            for t in rnd
        ]
        for rnd in doc["trees"]
    ]
    return TreeEnsemble(
        trees=trees,
        base_scores=np.asarray(doc["base_scores"], dtype=np.float64),
        learning_rate=doc["learning_rate"],
        max_depth=doc["max_depth"],
        n_rounds=doc["n_rounds"],
        n_features=doc["n_features"],
        n_classes=doc["n_classes"],
        degenerate=doc["degenerate"],
    )
