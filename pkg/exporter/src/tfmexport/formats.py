"""File interchange formats shared with the distillation engine.

Both inputs are CSVs with `# key=value` comment headers:

    fold plan:   row,fold            (plus n_rows, n_folds, fold_plan_hash)
    matrix:      row,label,f0..f{d-1} (plus n_rows, n_classes, n_features)

The output cache is the engine's canonical format: comment header with
format_version/dataset/teacher/n_rows/n_classes/n_folds/fold_plan_hash, then
`row,fold,p0..p{C-1}` records at 9 significant digits.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CACHE_FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def _parse_commented_csv(path) -> tuple[dict, list[str]]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh]
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    header: dict[str, str] = {}
    body: list[str] = []
    for ln in lines:
        if ln.startswith("#"):
            key, _, value = ln.lstrip("# ").partition("=")
            header[key.strip()] = value.strip()
        elif ln.strip():
            body.append(ln)
    if not body:
        raise FormatError(f"{path}: no data rows")
    return header, body


@dataclass(frozen=True)
class FoldPlanFile:
    n_rows: int
    n_folds: int
    fold_plan_hash: str
    assignment: np.ndarray


def read_fold_plan(path) -> FoldPlanFile:
    header, body = _parse_commented_csv(path)
    for key in ("n_rows", "n_folds", "fold_plan_hash"):
        if key not in header:
            raise FormatError(f"{path}: header is missing {key}")
    n = int(header["n_rows"])
    k = int(header["n_folds"])
    if body[0].split(",")[:2] != ["row", "fold"]:
        raise FormatError(f"{path}: expected a row,fold column header")
    records = body[1:]
    if len(records) != n:
        raise FormatError(f"{path}: {len(records)} records, header says {n}")
    assignment = np.full(n, -1, dtype=np.int64)
    for ln in records:
        row_s, fold_s = ln.split(",")[:2]
        row, fold = int(row_s), int(fold_s)
        if not 0 <= row < n:
            raise FormatError(f"{path}: row {row} out of range")
        if not 0 <= fold < k:
            raise FormatError(f"{path}: fold {fold} out of range")
        assignment[row] = fold
    if np.any(assignment < 0):
        missing = int(np.flatnonzero(assignment < 0)[0])
        raise FormatError(f"{path}: row {missing} has no fold assignment")
    return FoldPlanFile(n_rows=n, n_folds=k, fold_plan_hash=header["fold_plan_hash"],
                        assignment=assignment)


@dataclass(frozen=True)
class MatrixFile:
    dataset: str
    features: np.ndarray
    labels: np.ndarray
    n_classes: int


def read_matrix(path) -> MatrixFile:
    header, body = _parse_commented_csv(path)
    for key in ("n_rows", "n_classes", "n_features"):
        if key not in header:
            raise FormatError(f"{path}: header is missing {key}")
    n = int(header["n_rows"])
    c = int(header["n_classes"])
    d = int(header["n_features"])
    records = body[1:]
    if len(records) != n:
        raise FormatError(f"{path}: {len(records)} records, header says {n}")
    features = np.empty((n, d), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    seen = np.zeros(n, dtype=bool)
    for ln in records:
        parts = ln.split(",")
        if len(parts) != 2 + d:
            raise FormatError(f"{path}: record has {len(parts) - 2} features, expected {d}")
        row = int(parts[0])
        if not 0 <= row < n or seen[row]:
            raise FormatError(f"{path}: bad or duplicate row index {row}")
        seen[row] = True
        labels[row] = int(parts[1])
        features[row] = [float(v) for v in parts[2:]]
    if labels.min() < 0 or labels.max() >= c:
        raise FormatError(f"{path}: labels outside [0, {c})")
    return MatrixFile(dataset=header.get("dataset", "unknown"), features=features,
                      labels=labels, n_classes=c)


def format_cache(probs: np.ndarray, fold_of_row: np.ndarray, *, dataset: str,
                 teacher: str, n_folds: int, fold_plan_hash: str,
                 extra: dict | None = None) -> str:
    """Render a complete cache file as text (written atomically by callers)."""
    n, c = probs.shape
    lines = [
        f"# format_version={CACHE_FORMAT_VERSION}",
        f"# dataset={dataset}",
        f"# teacher={teacher}",
        f"# n_rows={n}",
        f"# n_classes={c}",
        f"# n_folds={n_folds}",
        f"# fold_plan_hash={fold_plan_hash}",
    ]
    for key in sorted(extra or {}):
        lines.append(f"# {key}={(extra or {})[key]}")
    lines.append("row,fold," + ",".join(f"p{j}" for j in range(c)))
    for i in range(n):
        vals = ",".join(format(probs[i, j], ".9g") for j in range(c))
        lines.append(f"{i},{int(fold_of_row[i])},{vals}")
    return "\n".join(lines) + "\n"
