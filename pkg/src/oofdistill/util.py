"""Shared helpers: seed derivation, stratified index splitting, softmax."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(base: int, *parts) -> int:
    """Deterministically derive a child seed from a base seed and a name path.

    Independent of process hash randomization, so parallel and serial runs
    of the same configuration see identical randomness.
    """
    key = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(f"{base}|{key}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


def stratified_holdout(labels: np.ndarray, fraction: float, seed: int,
                       min_per_class: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Split row indices into (rest, held) with ~`fraction` of each class held out.

    Every class keeps at least one row on each side when it has two or more
    members. Returns sorted index arrays.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    held = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            continue
        n_held = int(round(fraction * len(idx)))
        n_held = max(min_per_class, n_held)
        n_held = min(n_held, len(idx) - 1)
        perm = rng.permutation(idx)
        held.append(perm[:n_held])
    held_idx = np.sort(np.concatenate(held)) if held else np.array([], dtype=np.int64)
    mask = np.ones(len(labels), dtype=bool)
    mask[held_idx] = False
    return np.flatnonzero(mask), held_idx


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax."""
    z = np.asarray(z, dtype=np.float64)
    m = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def entropy_nats(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats per row, with 0*ln(0) treated as 0."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return -np.sum(terms, axis=-1)
