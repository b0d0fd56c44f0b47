"""Seeded synthetic tasks for demos and the acceptance suite."""
from __future__ import annotations

import numpy as np

from .data import Dataset


def write_dataset_csv(ds: Dataset, path) -> None:
    """Write a dataset as a loader-compatible CSV (label column `label`)."""
    lines = [",".join(ds.feature_names + ["label"])]
    for i in range(ds.n_rows):
        feats = ",".join(format(v, ".17g") for v in ds.features[i])
        lines.append(f"{feats},{int(ds.labels[i])}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def gaussian_mixture_task(n: int = 2000, d: int = 10, n_classes: int = 5,
                          seed: int = 0, center_scale: float = 0.5,
                          name: str = "gaussian-mixture") -> Dataset:
    """Balanced Gaussian blobs with unit within-class spread.

    `center_scale` controls class overlap: centers are standard normal draws
    scaled by it, so smaller values mean heavier mixing between classes.
    """
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 1.0, (n_classes, d)) * center_scale
    labels = np.arange(n) % n_classes
    labels = rng.permutation(labels)
    X = centers[labels] + rng.normal(0.0, 1.0, (n, d))
    return Dataset(
        name=name,
        features=X,
        labels=labels.astype(np.int64),
        C=n_classes,
        feature_names=[f"f{j}" for j in range(d)],
        categorical_flags=np.zeros(d, dtype=bool),
    )


def flip_labels(labels: np.ndarray, fraction: float, C: int, seed: int) -> np.ndarray:
    """Replace a seeded fraction of labels with a different uniform class."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels, dtype=np.int64).copy()
    n_flip = int(round(fraction * len(labels)))
    idx = rng.choice(len(labels), size=n_flip, replace=False)
    shift = rng.integers(1, C, size=n_flip)
    labels[idx] = (labels[idx] + shift) % C
    return labels


def separable_task(n: int = 400, d: int = 4, seed: int = 0,
                   margin: float = 4.0, name: str = "separable") -> Dataset:
    """Linearly separable two-class blobs with a wide margin."""
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 2).astype(np.int64)
    direction = np.ones(d) / np.sqrt(d)
    X = rng.normal(0.0, 1.0, (n, d)) + np.outer(2.0 * labels - 1.0, direction * margin)
    return Dataset(
        name=name,
        features=X,
        labels=labels,
        C=2,
        feature_names=[f"f{j}" for j in range(d)],
        categorical_flags=np.zeros(d, dtype=bool),
    )
