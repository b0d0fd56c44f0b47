"""Out-of-fold soft-label collection and per-sample annotation.

`collect_oof` is the leakage-aware path: every row's soft label comes from
teachers that were conditioned on the complement of that row's fold.
`collect_leaky` deliberately violates this (full-dataset conditioning) to
demonstrate why the out-of-fold procedure is necessary.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, FoldPlan
from .teachers import TeacherSpec, fit_teacher
from .util import derive_seed, entropy_nats


class LabelingError(RuntimeError):
    pass


@dataclass(frozen=True)
class AnnotationConfig:
    """Entropy-to-temperature map bounds and confidence-weight parameters."""

    t_min: float = 1.0
    t_max: float = 5.0
    mu: float = 0.7
    sigma: float = 0.2

    def validate(self) -> None:
        if self.t_min < 1.0:
            raise ValueError(f"t_min must be >= 1, got {self.t_min}")
        if self.t_max < self.t_min:
            raise ValueError(f"t_max ({self.t_max}) must be >= t_min ({self.t_min})")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")


@dataclass(frozen=True)
class SoftLabelSet:
    """Per-row teacher probability vectors plus frozen annotations.

    `entropy` (nats), `temperature` and `weight` are None until `annotate`
    fills them; they are computed once from the assembled matrix and never
    change during student training.
    """

    probs: np.ndarray
    entropy: np.ndarray | None = None
    temperature: np.ndarray | None = None
    weight: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def annotated(self) -> bool:
        return (
            self.entropy is not None
            and self.temperature is not None
            and self.weight is not None
        )

    @property
    def n_rows(self) -> int:
        return self.probs.shape[0]

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]

    def take(self, idx: np.ndarray) -> "SoftLabelSet":
        """Row-subset with annotations (when present) sliced along."""
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return SoftLabelSet(
            probs=self.probs[idx],
            entropy=pick(self.entropy),
            temperature=pick(self.temperature),
            weight=pick(self.weight),
            provenance=self.provenance,
        )


# caches round probabilities to 9 significant digits, so rows sourced from
# them sum to 1 only within ~C * 5e-10; 1e-6 is the loosest admitted producer
def _check_simplex(probs: np.ndarray, tol: float = 1e-6) -> None:
    if np.any(probs < 0):
        i = int(np.argwhere(probs < 0)[0][0])
        raise LabelingError(f"row {i} has a negative probability")
    sums = probs.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > tol)
    if bad.size:
        i = int(bad[0])
        raise LabelingError(f"row {i} probabilities sum to {sums[i]!r}, not 1")


def collect_oof(dataset: Dataset, plan: FoldPlan, specs: list[TeacherSpec],
                seed: int) -> SoftLabelSet:
    """Assemble out-of-fold soft labels for every row of the dataset.

    For each fold k, each teacher is fit on the fold complement and predicts
    fold k only; with several teachers the per-row vectors are averaged with
    equal weights. No teacher ever scores a row it conditioned on.
    """
    if not specs:
        raise LabelingError("no teacher specs given")
    if len(plan.assignment) != dataset.n_rows:
        raise LabelingError(
            f"fold plan covers {len(plan.assignment)} rows, dataset has {dataset.n_rows}"
        )
    n, C = dataset.n_rows, dataset.C
    total = np.zeros((n, C), dtype=np.float64)
    labeled = np.zeros(n, dtype=bool)
    for k in range(plan.K):
        query_idx = plan.fold_indices(k)
        ctx_idx = plan.complement_indices(k)
        if query_idx.size == 0:
            raise LabelingError(f"fold {k} is empty")
        assert not np.intersect1d(query_idx, ctx_idx).size
        for spec in specs:
            try:
                teacher = fit_teacher(
                    spec, dataset.features[ctx_idx], dataset.labels[ctx_idx],
                    C, seed=derive_seed(seed, spec.name, k),
                )
                p = teacher.predict_proba(dataset.features[query_idx],
                                          rows=query_idx, fold=k)
            except Exception as exc:
                raise LabelingError(f"teacher {spec.name!r} on fold {k}: {exc}") from exc
            total[query_idx] += p
        labeled[query_idx] = True
    if not labeled.all():
        raise LabelingError(f"row {int(np.flatnonzero(~labeled)[0])} was never labeled")
    probs = total / len(specs)
    _check_simplex(probs)
    return SoftLabelSet(
        probs=probs,
        provenance={
            "teachers": [s.name for s in specs],
            "fold_plan": plan.digest(),
            "fold_of_row": plan.assignment.copy(),
            "leaky": False,
        },
    )


def collect_leaky(dataset: Dataset, specs: list[TeacherSpec], seed: int) -> SoftLabelSet:
    """Fit each teacher on the full dataset and score the same rows.

    This is the in-context leakage pathology: a memorizing teacher returns
    near-one-hot recall of the stored labels. Exists only so the necessity of
    the out-of-fold procedure can be demonstrated and tested.
    """
    if not specs:
        raise LabelingError("no teacher specs given")
    for spec in specs:
        if spec.kind == "cache":
            raise LabelingError("cache teachers cannot be used for leaky labeling "
                                "(their conditioning cannot be verified)")
    n, C = dataset.n_rows, dataset.C
    total = np.zeros((n, C), dtype=np.float64)
    for spec in specs:
        teacher = fit_teacher(spec, dataset.features, dataset.labels, C,
                              seed=derive_seed(seed, spec.name, "full"))
        total += teacher.predict_in_context(dataset.features)
    probs = total / len(specs)
    _check_simplex(probs)
    return SoftLabelSet(
        probs=probs,
        provenance={"teachers": [s.name for s in specs], "fold_plan": None,
                    "fold_of_row": None, "leaky": True},
    )


def annotate(labels: SoftLabelSet, config: AnnotationConfig, C: int) -> SoftLabelSet:
    """Fill entropy (nats), per-sample temperature, and confidence weight.

    Temperature is linear in normalized entropy: t_min + (t_max - t_min) *
    H / ln(C), clamped to [t_min, t_max]. The weight is a Gaussian of entropy
    peaking at mu, down-weighting both overconfident and near-random rows.
    """
    config.validate()
    if C < 2:
        raise LabelingError(f"need at least 2 classes, got {C}")
    if labels.probs.shape[1] != C:
        raise LabelingError(f"probs have {labels.probs.shape[1]} columns, expected {C}")
    _check_simplex(labels.probs)
    H = entropy_nats(labels.probs)
    T = config.t_min + (config.t_max - config.t_min) * H / np.log(C)
    T = np.clip(T, config.t_min, config.t_max)
    w = np.exp(-((H - config.mu) ** 2) / (2.0 * config.sigma**2))
    return replace(labels, entropy=H, temperature=T, weight=w)
