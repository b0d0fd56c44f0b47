"""Evaluation metrics and nonparametric statistics.

ROC-AUC uses the Mann-Whitney formulation with midranks, so tied score pairs
count 0.5. The Wilcoxon signed-rank test has an exact branch (rank-sum
distribution built by convolution, matching full sign enumeration) for small
n and a tie- and continuity-corrected normal approximation above the cutoff.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2 as _chi2

from .util import derive_seed, stratified_holdout

EXACT_WILCOXON_MAX_N = 25


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricRow:
    """One (dataset, model) evaluation record."""

    dataset: str
    model: str
    auc: float
    ece: float | None = None
    latency_ms: float | None = None
    n_features: int | None = None
    teacher_auc: float | None = None


@dataclass(frozen=True)
class StatResult:
    statistic: float
    p_value: float
    n_effective: int
    method: str  # "exact" | "normal-approximation"


@dataclass(frozen=True)
class WinRateSummary:
    win_rate: float
    mean_win: float | None
    mean_loss: float | None
    n: int


@dataclass(frozen=True)
class FeatureSplitSummary:
    median_features: float
    low_n: int
    low_mean_delta: float
    high_n: int
    high_mean_delta: float


def _midranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing their midrank."""
    values = np.asarray(values)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        # positions i..j (0-based) share rank (i+1 + j+1) / 2
        ranks[order[i:j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    return ranks


def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one positive and one negative")
    ranks = _midranks(scores)
    rank_sum = float(ranks[positive].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """ROC-AUC from a class-probability matrix (or a positive-class vector).

    Binary labels use the Mann-Whitney statistic on the positive-class score;
    multiclass is the unweighted mean of one-vs-rest AUCs.
    """
    labels = np.asarray(labels, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise MetricError("labels contain a single class")
    if scores.ndim == 1:
        return _binary_auc(scores, labels == labels.max())
    if len(classes) == 2:
        pos = int(classes.max())
        return _binary_auc(scores[:, pos], labels == pos)
    aucs = [_binary_auc(scores[:, int(c)], labels == c) for c in classes]
    return float(np.mean(aucs))


def retention(student_auc: float, teacher_auc: float) -> float:
    """Student AUC as a percentage of the reference teacher AUC."""
    if teacher_auc <= 0:
        raise MetricError(f"teacher AUC must be > 0, got {teacher_auc}")
    return 100.0 * student_auc / teacher_auc


def win_rate(deltas) -> WinRateSummary:
    """Fraction of strictly positive deltas, with mean win/loss magnitudes.

    Ties count as non-wins.
    """
    d = np.asarray(list(deltas), dtype=np.float64)
    if d.size == 0:
        raise MetricError("empty delta list")
    wins = d[d > 0]
    losses = d[d < 0]
    return WinRateSummary(
        win_rate=float(len(wins)) / len(d),
        mean_win=float(wins.mean()) if len(wins) else None,
        mean_loss=float(losses.mean()) if len(losses) else None,
        n=len(d),
    )


def _wilcoxon_exact_p(ranks2: np.ndarray, w2_obs: int) -> float:
    """P(min(W+, W-) <= observed) by convolving the rank-sum distribution.

    `ranks2` are doubled midranks (integers), `w2_obs` the doubled observed
    min statistic. Counts stay below 2^53 for n <= 25, so float64 is exact.
    """
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in ranks2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    sums = np.arange(total + 1)
    in_tail = np.minimum(sums, total - sums) <= w2_obs
    return float(counts[in_tail].sum() / 2.0 ** len(ranks2))


def wilcoxon_signed_rank(deltas) -> StatResult:
    """Two-sided Wilcoxon signed-rank test on paired deltas.

    Zeros are dropped; tied magnitudes share midranks. The statistic is
    W = min(W+, W-); the two-sided p-value is P(min(W+, W-) <= W) under the
    null (all 2^n sign assignments equally likely), computed exactly for
    n <= 25 and by normal approximation with tie and continuity corrections
    for larger n.
    """
    d = np.asarray(list(deltas), dtype=np.float64)
    d = d[d != 0.0]
    n = len(d)
    if n < 5:
        raise MetricError(f"need at least 5 nonzero deltas, got {n}")
    ranks = _midranks(np.abs(d))
    w_pos = float(ranks[d > 0].sum())
    w_neg = float(ranks[d < 0].sum())
    w = min(w_pos, w_neg)
    if n <= EXACT_WILCOXON_MAX_N:
        ranks2 = np.rint(2.0 * ranks).astype(np.int64)
        p = _wilcoxon_exact_p(ranks2, int(round(2.0 * w)))
        return StatResult(statistic=w, p_value=min(p, 1.0), n_effective=n, method="exact")
    mu = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    tie_term = float(np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts)) / 48.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    if var <= 0:
        raise MetricError("all deltas are tied; variance is zero")
    z = (w - mu + 0.5) / math.sqrt(var)
    p = min(1.0, 2.0 * 0.5 * math.erfc(-z / math.sqrt(2.0)))
    return StatResult(statistic=w, p_value=p, n_effective=n, method="normal-approximation")


def friedman(auc_table: np.ndarray) -> StatResult:
    """Friedman rank test over a (datasets x methods) score matrix."""
    table = np.asarray(auc_table, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] < 2 or table.shape[1] < 2:
        raise MetricError(f"need at least 2 datasets and 2 methods, got {table.shape}")
    n, k = table.shape
    ranks = np.vstack([_midranks(row) for row in table])
    col_sums = ranks.sum(axis=0)
    stat = 12.0 / (n * k * (k + 1)) * float(np.sum(col_sums**2)) - 3.0 * n * (k + 1)
    p = float(_chi2.sf(stat, k - 1))
    return StatResult(statistic=stat, p_value=p, n_effective=n, method="exact")


def ece(probs: np.ndarray, labels: np.ndarray, n_bins: int = 15) -> float:
    """Expected calibration error with equal-width confidence bins."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or len(probs) == 0:
        raise MetricError("probs must be a non-empty (N, C) matrix")
    conf = probs.max(axis=1)
    pred = probs.argmax(axis=1)
    correct = (pred == labels).astype(np.float64)
    bins = np.minimum((conf * n_bins).astype(np.int64), n_bins - 1)
    total = 0.0
    for b in range(n_bins):
        mask = bins == b
        if not mask.any():
            continue
        gap = abs(correct[mask].mean() - conf[mask].mean())
        total += mask.sum() / len(probs) * gap
    return float(total)


def _scale_probs(probs: np.ndarray, T: float, eps: float = 1e-12) -> np.ndarray:
    """Renormalized probs^(1/T); T < 1 sharpens, T > 1 softens."""
    logs = np.log(np.maximum(probs, eps)) / T
    logs -= logs.max(axis=1, keepdims=True)
    e = np.exp(logs)
    return e / e.sum(axis=1, keepdims=True)


def temperature_scale(probs: np.ndarray, T: float) -> np.ndarray:
    """Apply a post-hoc calibration temperature to a probability matrix."""
    return _scale_probs(np.asarray(probs, dtype=np.float64), T)


def _nll(probs: np.ndarray, labels: np.ndarray) -> float:
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, 1e-300))))


def fit_temperature(probs: np.ndarray, labels: np.ndarray,
                    val_fraction: float = 0.05, seed: int = 0,
                    search: tuple[float, float] = (0.25, 8.0)) -> float:
    """Post-hoc calibration temperature via golden-section search.

    Minimizes validation NLL of the rescaled probabilities over the search
    interval. Returns 1.0 whenever no candidate improves on the unscaled
    probabilities, so applying the result never increases validation NLL.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(probs) < 20:
        raise MetricError(f"need at least 20 rows to carve a validation split, got {len(probs)}")
    _, val_idx = stratified_holdout(labels, val_fraction, derive_seed(seed, "caltemp"))
    if val_idx.size == 0:
        raise MetricError("degenerate validation split")
    pv, yv = probs[val_idx], labels[val_idx]

    def objective(T: float) -> float:
        return _nll(_scale_probs(pv, T), yv)

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    lo, hi = search
    a, b = lo, hi
    c = b - invphi * (b - a)
    dd = a + invphi * (b - a)
    fc, fd = objective(c), objective(dd)
    for _ in range(80):
        if fc < fd:
            b, dd, fd = dd, c, fc
            c = b - invphi * (b - a)
            fc = objective(c)
        else:
            a, c, fc = c, dd, fd
            dd = a + invphi * (b - a)
            fd = objective(dd)
    t_star = (a + b) / 2.0
    if objective(t_star) > objective(1.0):
        return 1.0
    return float(t_star)


def feature_split_analysis(rows: list[MetricRow], baseline: str,
                           subject: str) -> FeatureSplitSummary:
    """Mean (subject - baseline) AUC delta, split at the median feature count.

    Datasets exactly at the median go to the low group.
    """
    by_dataset: dict[str, dict[str, MetricRow]] = {}
    for r in rows:
        by_dataset.setdefault(r.dataset, {})[r.model] = r
    deltas, feats = [], []
    for name in sorted(by_dataset):
        models = by_dataset[name]
        if baseline not in models or subject not in models:
            raise MetricError(f"dataset {name!r} is missing {baseline!r} or {subject!r}")
        sub, base = models[subject], models[baseline]
        if sub.n_features is None:
            raise MetricError(f"dataset {name!r} has no feature count")
        deltas.append(sub.auc - base.auc)
        feats.append(sub.n_features)
    deltas_arr = np.asarray(deltas)
    feats_arr = np.asarray(feats, dtype=np.float64)
    median = float(np.median(feats_arr))
    low = feats_arr <= median
    return FeatureSplitSummary(
        median_features=median,
        low_n=int(low.sum()),
        low_mean_delta=float(deltas_arr[low].mean()) if low.any() else float("nan"),
        high_n=int((~low).sum()),
        high_mean_delta=float(deltas_arr[~low].mean()) if (~low).any() else float("nan"),
    )
