"""Dataset ingestion, preprocessing, and stratified fold planning."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass

import numpy as np

DEFAULT_FOLDS = 5

# Cell values treated as missing in numeric columns (compared lowercase).
MISSING_TOKENS = {"", "na", "n/a", "nan", "null", "none", "?"}


class DataError(ValueError):
    """Unusable input data: bad file, absent label column, class too small."""


@dataclass(frozen=True)
class Dataset:
    """Preprocessed classification dataset.

    `features` is an (N, d) float64 matrix with no NaNs; `labels` holds dense
    class indices in [0, C). `categorical_flags` marks integer-encoded columns
    so tree students may treat them as ordinal.
    """

    name: str
    features: np.ndarray
    labels: np.ndarray
    C: int
    feature_names: list[str]
    categorical_flags: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: np.ndarray, name: str | None = None) -> "Dataset":
        """Row-subset view sharing class indexing with the parent."""
        return Dataset(
            name=name or self.name,
            features=self.features[idx],
            labels=self.labels[idx],
            C=self.C,
            feature_names=self.feature_names,
            categorical_flags=self.categorical_flags,
        )


@dataclass(frozen=True)
class FoldPlan:
    """Assignment of every row to exactly one of K folds."""

    K: int
    assignment: np.ndarray
    seed: int

    def digest(self) -> str:
        """Stable hash identifying the plan, used by prediction caches."""
        h = hashlib.sha256()
        h.update(b"foldplan-v1")
        h.update(np.int64(self.K).tobytes())
        h.update(np.int64(self.seed).tobytes())
        h.update(np.ascontiguousarray(self.assignment, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]

    def fold_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def complement_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != k)


def _is_missing(cell: str) -> bool:
    return cell.strip().lower() in MISSING_TOKENS


def _parse_numeric(cell: str) -> float | None:
    """Float value of a cell, or None if it does not parse as a number."""
    try:
        return float(cell)
    except ValueError:
        return None


def load_dataset(path, label_column: str, *, name: str | None = None,
                 min_class_count: int = DEFAULT_FOLDS) -> Dataset:
    """Load a comma-separated file with a header row into a Dataset.

    Labels are re-indexed to dense [0, C) by first appearance. Missing numeric
    values become 0.0; columns with any non-numeric entry are integer-encoded
    by first-appearance order and flagged categorical. Row order is preserved.
    """
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty file")
            rows = [r for r in reader if r]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    header = [h.strip() for h in header]
    if label_column not in header:
        raise DataError(f"{path}: label column {label_column!r} not in header {header}")
    if not rows:
        raise DataError(f"{path}: no data rows")
    width = len(header)
    for i, r in enumerate(rows):
        if len(r) != width:
            raise DataError(f"{path}: row {i} has {len(r)} cells, expected {width}")

    label_pos = header.index(label_column)
    feature_names = [h for j, h in enumerate(header) if j != label_pos]
    feature_pos = [j for j in range(width) if j != label_pos]

    # Labels: dense re-index by first appearance.
    label_codes: dict[str, int] = {}
    labels = np.empty(len(rows), dtype=np.int64)
    for i, r in enumerate(rows):
        raw = r[label_pos].strip()
        if _is_missing(raw):
            raise DataError(f"{path}: row {i} has a missing label")
        if raw not in label_codes:
            label_codes[raw] = len(label_codes)
        labels[i] = label_codes[raw]
    C = len(label_codes)
    if C < 2:
        raise DataError(f"{path}: single-class dataset (label {next(iter(label_codes))!r})")

    n, d = len(rows), len(feature_pos)
    features = np.zeros((n, d), dtype=np.float64)
    categorical = np.zeros(d, dtype=bool)
    for out_j, j in enumerate(feature_pos):
        column = [r[j] for r in rows]
        numeric = True
        for cell in column:
            if not _is_missing(cell) and _parse_numeric(cell) is None:
                numeric = False
                break
        if numeric:
            for i, cell in enumerate(column):
                if _is_missing(cell):
                    features[i, out_j] = 0.0
                else:
                    v = float(cell)
                    features[i, out_j] = 0.0 if np.isnan(v) else v
        else:
            categorical[out_j] = True
            codes: dict[str, int] = {}
            for i, cell in enumerate(column):
                key = cell.strip()
                if key not in codes:
                    codes[key] = len(codes)
                features[i, out_j] = codes[key]

    counts = np.bincount(labels, minlength=C)
    small = np.flatnonzero(counts < min_class_count)
    if small.size:
        c = int(small[0])
        raise DataError(
            f"{path}: class {c} has {int(counts[c])} rows, "
            f"needs at least {min_class_count} for stratification"
        )
    if n < 2 * min_class_count:
        raise DataError(f"{path}: only {n} rows, need at least {2 * min_class_count}")

    return Dataset(
        name=name or str(path),
        features=features,
        labels=labels,
        C=C,
        feature_names=feature_names,
        categorical_flags=categorical,
    )


def make_folds(labels: np.ndarray, K: int, seed: int) -> FoldPlan:
    """Stratified fold assignment: seeded shuffle within each class, then
    round-robin over folds (start rotated per class to spread remainders)."""
    labels = np.asarray(labels)
    if K < 2:
        raise DataError(f"K={K}: need at least 2 folds")
    classes, counts = np.unique(labels, return_counts=True)
    too_small = classes[counts < K]
    if too_small.size:
        c = int(too_small[0])
        raise DataError(f"class {c} has {int(counts[classes == c][0])} rows, fewer than K={K}")

    rng = np.random.default_rng(seed)
    assignment = np.full(len(labels), -1, dtype=np.int64)
    for ci, c in enumerate(classes):
        idx = np.flatnonzero(labels == c)
        perm = rng.permutation(idx)
        assignment[perm] = (ci + np.arange(len(perm))) % K
    return FoldPlan(K=K, assignment=assignment, seed=seed)
