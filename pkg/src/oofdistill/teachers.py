"""Built-in reference teachers and the external prediction-cache teacher.

The built-in teachers share the in-context-learning shape: "fitting" is
little more than conditioning on a context set, which is exactly what makes
scoring rows from that context degenerate (near-one-hot recall). The knn
teacher with k=1 reproduces that pathology on purpose.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .util import softmax

VALID_KINDS = ("knn", "multinomial-logistic", "cache")


class TeacherError(ValueError):
    pass


@dataclass(frozen=True)
class TeacherSpec:
    """Declarative description of a teacher.

    `smoothing` for knn is the uniform-mixture mass: predicted probabilities
    are (1 - s) * neighbor-label frequency + s / C, keeping entropy and KL
    finite for unanimous neighborhoods.
    """

    kind: str
    name: str
    k: int = 5
    smoothing: float = 1e-3
    l2: float = 1e-4
    max_iter: int = 500
    path: str | None = None

    def validate(self) -> None:
        if self.kind not in VALID_KINDS:
            raise TeacherError(f"unknown teacher kind {self.kind!r}")
        if self.kind == "knn":
            if self.k < 1:
                raise TeacherError(f"knn k must be >= 1, got {self.k}")
            if not 0.0 <= self.smoothing <= 1.0:
                raise TeacherError(f"knn smoothing must be in [0, 1], got {self.smoothing}")
        if self.kind == "multinomial-logistic":
            if self.l2 < 0 or self.max_iter < 1:
                raise TeacherError("logistic needs l2 >= 0 and max_iter >= 1")
        if self.kind == "cache" and not self.path:
            raise TeacherError("cache teacher needs a file path")


class FittedTeacher:
    """A teacher conditioned on a context, ready to score query rows."""

    spec: TeacherSpec
    n_classes: int

    def predict_proba(self, X: np.ndarray, rows: np.ndarray | None = None,
                      fold: int | None = None) -> np.ndarray:
        raise NotImplementedError

    def predict_in_context(self, X: np.ndarray) -> np.ndarray:
        """Score rows that are members of the teacher's own context.

        This is the leaky regime the out-of-fold procedure exists to avoid;
        it is exposed so the pathology can be demonstrated and tested.
        """
        raise TeacherError(f"{self.spec.kind} teacher does not support in-context prediction")

    def _check_dim(self, X: np.ndarray, d: int) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != d:
            raise TeacherError(f"query dimensionality {X.shape} does not match context d={d}")
        return X


class _ContextTeacher(FittedTeacher):
    """Base for teachers that keep their training rows around."""

    def __init__(self, spec: TeacherSpec, X: np.ndarray, y: np.ndarray, C: int):
        if len(X) == 0:
            raise TeacherError("empty context")
        present = np.unique(y)
        if len(present) < C:
            missing = sorted(set(range(C)) - set(int(c) for c in present))
            raise TeacherError(f"context is missing classes {missing}")
        self.spec = spec
        self.context_X = np.ascontiguousarray(X, dtype=np.float64)
        self.context_y = np.asarray(y, dtype=np.int64)
        self.n_classes = C
        self._row_index: dict[bytes, int] | None = None

    def _locate_in_context(self, X: np.ndarray) -> np.ndarray:
        """Map query rows to context row indices by exact value identity."""
        if self._row_index is None:
            self._row_index = {}
            for i, row in enumerate(self.context_X):
                self._row_index.setdefault(row.tobytes(), i)
        X = self._check_dim(X, self.context_X.shape[1])
        out = np.empty(len(X), dtype=np.int64)
        for i, row in enumerate(np.ascontiguousarray(X, dtype=np.float64)):
            hit = self._row_index.get(row.tobytes())
            if hit is None:
                raise TeacherError(f"in-context query row {i} is not a member of the context")
            out[i] = hit
        return out

    def predict_in_context(self, X: np.ndarray) -> np.ndarray:
        idx = self._locate_in_context(X)
        return self.predict_proba(self.context_X[idx])


class KnnTeacher(_ContextTeacher):
    """k-nearest-neighbour class-frequency teacher.

    Euclidean distance on preprocessed features; distance ties break toward
    the lower context row index. With k=1 and a query drawn from the context,
    the query matches itself and the output is (up to smoothing) a one-hot
    recall of the stored label.
    """

    def predict_proba(self, X, rows=None, fold=None):
        X = self._check_dim(X, self.context_X.shape[1])
        n_ctx = len(self.context_X)
        k = min(self.spec.k, n_ctx)
        s = self.spec.smoothing
        C = self.n_classes
        out = np.empty((len(X), C), dtype=np.float64)
        # Chunked exact squared distances: identical rows give exactly 0.0,
        # which the stable sort then resolves by row index.
        chunk = max(1, int(2e6) // max(1, n_ctx))
        for start in range(0, len(X), chunk):
            q = X[start:start + chunk]
            d2 = np.sum((q[:, None, :] - self.context_X[None, :, :]) ** 2, axis=2)
            order = np.argsort(d2, axis=1, kind="stable")[:, :k]
            neigh = self.context_y[order]
            counts = np.zeros((len(q), C), dtype=np.float64)
            for j in range(k):
                np.add.at(counts, (np.arange(len(q)), neigh[:, j]), 1.0)
            out[start:start + len(q)] = (1.0 - s) * (counts / k) + s / C
        return out


class LogisticTeacher(_ContextTeacher):
    """Multinomial logistic regression fit by full-batch gradient descent.

    Features are standardized internally; the step size is 1/L with L
    estimated from the data by power iteration, so training is deterministic
    with no tuning. If the gradient has not vanished within `max_iter`
    steps the best iterate is kept and `converged` is False.
    """

    def __init__(self, spec, X, y, C, seed=0):
        super().__init__(spec, X, y, C)
        self._mean = self.context_X.mean(axis=0)
        std = self.context_X.std(axis=0)
        self._std = np.where(std > 0, std, 1.0)
        self.converged = False
        self._fit()

    def _design(self, X: np.ndarray) -> np.ndarray:
        Z = (X - self._mean) / self._std
        return np.hstack([Z, np.ones((len(Z), 1))])

    def _fit(self) -> None:
        A = self._design(self.context_X)
        n, p = A.shape
        C = self.n_classes
        Y = np.zeros((n, C))
        Y[np.arange(n), self.context_y] = 1.0
        l2 = self.spec.l2

        # Lipschitz bound for the mean-reduced multinomial CE gradient:
        # 0.5 * sigma_max(A)^2 / n + l2, sigma_max via power iteration.
        v = np.full(p, 1.0 / np.sqrt(p))
        for _ in range(50):
            w = A.T @ (A @ v)
            norm = np.linalg.norm(w)
            if norm == 0:
                break
            v = w / norm
        sigma_sq = float(v @ (A.T @ (A @ v)))
        step = 1.0 / (0.5 * sigma_sq / n + l2 + 1e-12)

        W = np.zeros((p, C))
        best_W, best_loss = W.copy(), np.inf
        for _ in range(self.spec.max_iter):
            P = softmax(A @ W)
            grad = A.T @ (P - Y) / n
            grad[:-1] += l2 * W[:-1]
            loss = -np.mean(np.log(np.maximum(P[np.arange(n), self.context_y], 1e-300)))
            loss += 0.5 * l2 * float(np.sum(W[:-1] ** 2))
            if loss < best_loss:
                best_loss, best_W = loss, W.copy()
            gnorm = float(np.sqrt(np.sum(grad**2)))
            if gnorm < 1e-8:
                self.converged = True
                break
            W = W - step * grad
        else:
            # one last chance for the final iterate to be the best one
            P = softmax(A @ W)
            loss = -np.mean(np.log(np.maximum(P[np.arange(n), self.context_y], 1e-300)))
            loss += 0.5 * l2 * float(np.sum(W[:-1] ** 2))
            if loss < best_loss:
                best_loss, best_W = loss, W.copy()
        self.weights = best_W

    def predict_proba(self, X, rows=None, fold=None):
        X = self._check_dim(X, self.context_X.shape[1])
        return softmax(self._design(X) @ self.weights)


class CacheTeacher(FittedTeacher):
    """Teacher backed by an externally produced prediction cache.

    Fitting is a no-op beyond header validation (done when the cache file is
    read); prediction is a (fold, row-index) lookup into the stored matrix.
    """

    def __init__(self, spec: TeacherSpec, probs: np.ndarray, fold_of_row: np.ndarray):
        self.spec = spec
        self.probs = probs
        self.fold_of_row = fold_of_row
        self.n_classes = probs.shape[1]

    def predict_proba(self, X, rows=None, fold=None):
        if rows is None:
            raise TeacherError("cache teacher needs the query row indices")
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= len(self.probs)):
            bad = rows[(rows < 0) | (rows >= len(self.probs))][0]
            raise TeacherError(f"cache has no row {int(bad)}")
        if fold is not None:
            mismatch = np.flatnonzero(self.fold_of_row[rows] != fold)
            if mismatch.size:
                r = int(rows[mismatch[0]])
                raise TeacherError(
                    f"cache stores row {r} under fold {int(self.fold_of_row[r])}, "
                    f"but fold {fold} was requested"
                )
        return self.probs[rows].copy()


def fit_teacher(spec: TeacherSpec, X: np.ndarray, y: np.ndarray, C: int,
                seed: int = 0) -> FittedTeacher:
    """Condition a teacher on a context (the fold complement in OOF use)."""
    spec.validate()
    if spec.kind == "knn":
        return KnnTeacher(spec, X, y, C)
    if spec.kind == "multinomial-logistic":
        return LogisticTeacher(spec, X, y, C, seed=seed)
    if spec.kind == "cache":
        from .cache import read_cache  # deferred: cache module depends on labeling

        soft, meta = read_cache(spec.path)
        if meta.n_classes != C:
            raise TeacherError(
                f"cache {spec.path} has {meta.n_classes} classes, dataset has {C}"
            )
        return CacheTeacher(spec, soft.probs, meta.fold_of_row)
    raise TeacherError(f"unknown teacher kind {spec.kind!r}")
