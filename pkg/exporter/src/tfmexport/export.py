"""Fold-by-fold export: condition on each fold complement, score the fold.

The context never intersects the queries, so the produced soft labels are
leakage-free by construction. The explicit --leaky mode conditions on the
full dataset instead (scoring rows the model has already seen) purely to
demonstrate the in-context recall pathology; caches written that way carry
mode=full-context in their header.

Output is atomic: the cache is assembled and validated in memory, written to
a temporary file, and renamed into place. A failure leaves no partial file.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .formats import FormatError, format_cache, read_fold_plan, read_matrix
from .models import load_model


class ExportError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExportJob:
    matrix_path: str
    fold_plan_path: str
    output_path: str
    model_id: str = "stub"
    device: str = "cpu"
    seed: int = 0
    leaky: bool = False


def export_cache(job: ExportJob) -> str:
    """Run the model per fold and write the cache file. Returns the path."""
    try:
        matrix = read_matrix(job.matrix_path)
        plan = read_fold_plan(job.fold_plan_path)
    except FormatError as exc:
        raise ExportError(str(exc)) from exc
    if plan.n_rows != len(matrix.features):
        raise ExportError(
            f"fold plan covers {plan.n_rows} rows, matrix has {len(matrix.features)}"
        )

    model = load_model(job.model_id, device=job.device, seed=job.seed)
    n, C = len(matrix.features), matrix.n_classes
    probs = np.full((n, C), np.nan)
    if job.leaky:
        model.condition(matrix.features, matrix.labels, C)
        probs[:] = model.predict_proba(matrix.features)
    else:
        for k in range(plan.n_folds):
            query = np.flatnonzero(plan.assignment == k)
            ctx = np.flatnonzero(plan.assignment != k)
            if query.size == 0:
                raise ExportError(f"fold {k} is empty")
            assert not np.intersect1d(query, ctx).size
            model.condition(matrix.features[ctx], matrix.labels[ctx], C)
            probs[query] = model.predict_proba(matrix.features[query])

    if np.any(np.isnan(probs)):
        missing = int(np.flatnonzero(np.isnan(probs).any(axis=1))[0])
        raise ExportError(f"coverage gap: row {missing} was never scored")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(probs < 0):
        bad = int(np.flatnonzero(np.abs(sums - 1.0) > 1e-6)[0])
        raise ExportError(f"model emitted a non-simplex row {bad} (sum {sums[bad]!r})")

    text = format_cache(
        probs, plan.assignment,
        dataset=matrix.dataset, teacher=model.name, n_folds=plan.n_folds,
        fold_plan_hash=plan.fold_plan_hash,
        extra={"mode": "full-context" if job.leaky else "oof",
               "device": job.device, "exporter": "tfm-exporter/0.1.0"},
    )
    tmp_path = f"{job.output_path}.tmp"
    with open(tmp_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp_path, job.output_path)
    return job.output_path
