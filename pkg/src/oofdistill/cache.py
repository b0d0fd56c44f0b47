"""Prediction-cache wire format.

Text CSV with a comment header so caches are auditable and writable from any
language. Layout:

    # format_version=1
    # dataset=<name>
    # teacher=<name>
    # n_rows=<N>
    # n_classes=<C>
    # n_folds=<K>
    # fold_plan_hash=<hex>
    row,fold,p0,...,p{C-1}
    0,3,0.333333333,...

Probabilities carry 9 significant digits; output is byte-identical for
identical inputs. Reading validates the full invariant set: row coverage,
simplex sums, fold consistency, and (when a plan is supplied) the plan hash.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import FoldPlan
from .labeling import SoftLabelSet

FORMAT_VERSION = 1
_SUM_TOL = 1e-6


class CacheError(ValueError):
    pass


@dataclass(frozen=True)
class CacheMeta:
    dataset: str
    teacher: str
    n_rows: int
    n_classes: int
    n_folds: int
    fold_plan_hash: str
    format_version: int = FORMAT_VERSION
    fold_of_row: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def write_cache(labels: SoftLabelSet, plan: FoldPlan, path, *,
                dataset: str, teacher: str, extra: dict | None = None) -> None:
    """Write soft labels as a canonical prediction-cache file."""
    probs = labels.probs
    n, C = probs.shape
    if len(plan.assignment) != n:
        raise CacheError(f"fold plan covers {len(plan.assignment)} rows, labels have {n}")
    header = {
        "format_version": FORMAT_VERSION,
        "dataset": dataset,
        "teacher": teacher,
        "n_rows": n,
        "n_classes": C,
        "n_folds": plan.K,
        "fold_plan_hash": plan.digest(),
    }
    lines = [f"# {k}={header[k]}" for k in header]
    for k in sorted(extra or {}):
        lines.append(f"# {k}={(extra or {})[k]}")
    lines.append("row,fold," + ",".join(f"p{c}" for c in range(C)))
    for i in range(n):
        vals = ",".join(format(probs[i, c], ".9g") for c in range(C))
        lines.append(f"{i},{int(plan.assignment[i])},{vals}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_cache(path, expected_plan: FoldPlan | None = None) -> tuple[SoftLabelSet, CacheMeta]:
    """Parse and validate a prediction-cache file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw_lines = [ln.rstrip("\n") for ln in fh]
    except OSError as exc:
        raise CacheError(f"cannot read cache {path}: {exc}") from exc

    header: dict[str, str] = {}
    body_start = None
    for i, ln in enumerate(raw_lines):
        if ln.startswith("#"):
            key, _, value = ln.lstrip("# ").partition("=")
            header[key.strip()] = value.strip()
        elif ln.strip():
            body_start = i
            break
    if body_start is None:
        raise CacheError(f"{path}: no data rows")

    required = ("format_version", "dataset", "teacher", "n_rows", "n_classes",
                "n_folds", "fold_plan_hash")
    missing = [k for k in required if k not in header]
    if missing:
        raise CacheError(f"{path}: header is missing {missing}")
    version = int(header["format_version"])
    if version != FORMAT_VERSION:
        raise CacheError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    n = int(header["n_rows"])
    C = int(header["n_classes"])
    K = int(header["n_folds"])

    columns = raw_lines[body_start].split(",")
    if len(columns) != 2 + C:
        raise CacheError(
            f"{path}: {len(columns) - 2} probability columns, header says {C} classes"
        )
    data_lines = [ln for ln in raw_lines[body_start + 1:] if ln.strip()]
    if len(data_lines) != n:
        raise CacheError(f"{path}: {len(data_lines)} records, header says {n}")

    probs = np.empty((n, C), dtype=np.float64)
    fold_of_row = np.empty(n, dtype=np.int64)
    seen = np.zeros(n, dtype=bool)
    for ln in data_lines:
        parts = ln.split(",")
        if len(parts) != 2 + C:
            raise CacheError(f"{path}: malformed record {ln!r}")
        row = int(parts[0])
        if row < 0 or row >= n:
            raise CacheError(f"{path}: row index {row} out of range [0, {n})")
        if seen[row]:
            raise CacheError(f"{path}: row {row} appears more than once")
        seen[row] = True
        fold = int(parts[1])
        if fold < 0 or fold >= K:
            raise CacheError(f"{path}: row {row} has fold {fold} outside [0, {K})")
        fold_of_row[row] = fold
        probs[row] = [float(v) for v in parts[2:]]
    if not seen.all():
        raise CacheError(f"{path}: row {int(np.flatnonzero(~seen)[0])} is missing")

    if np.any(probs < 0):
        bad = int(np.argwhere(probs < 0)[0][0])
        raise CacheError(f"{path}: row {bad} has a negative probability")
    sums = probs.sum(axis=1)
    bad_rows = np.flatnonzero(np.abs(sums - 1.0) > _SUM_TOL)
    if bad_rows.size:
        r = int(bad_rows[0])
        raise CacheError(f"{path}: row {r} probabilities sum to {sums[r]:.9g}, not 1")

    if expected_plan is not None:
        if header["fold_plan_hash"] != expected_plan.digest():
            raise CacheError(
                f"{path}: fold plan hash {header['fold_plan_hash']} does not match "
                f"the current plan {expected_plan.digest()}"
            )
        mismatch = np.flatnonzero(fold_of_row != expected_plan.assignment)
        if mismatch.size:
            r = int(mismatch[0])
            raise CacheError(
                f"{path}: row {r} stored under fold {int(fold_of_row[r])}, "
                f"plan assigns fold {int(expected_plan.assignment[r])}"
            )

    meta = CacheMeta(
        dataset=header["dataset"],
        teacher=header["teacher"],
        n_rows=n,
        n_classes=C,
        n_folds=K,
        fold_plan_hash=header["fold_plan_hash"],
        format_version=version,
        fold_of_row=fold_of_row,
        extra={k: v for k, v in header.items() if k not in required},
    )
    soft = SoftLabelSet(
        probs=probs,
        provenance={
            "teachers": [header["teacher"]],
            "fold_plan": header["fold_plan_hash"],
            "fold_of_row": fold_of_row.copy(),
            "leaky": header.get("mode") == "full-context",
        },
    )
    return soft, meta
