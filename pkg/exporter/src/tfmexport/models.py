"""In-context model registry.

Real tabular foundation models (tabpfn, tabicl, ...) are optional heavyweight
dependencies resolved at run time; the bundled kernel-smoother stub has the
same conditioning shape (fit = store the context, predict = attend to it) and
stands in for them in tests and CI. Like the real thing, scoring a row that
sits in its own context collapses to near-one-hot recall, which the --leaky
demonstration mode exposes.
"""
from __future__ import annotations

import numpy as np


class ModelError(RuntimeError):
    pass


class StubIclModel:
    """Gaussian-kernel class-frequency smoother over the context set.

    The bandwidth is a fixed fraction of the mean nearest-neighbour distance,
    so the self-term dominates whenever a query row is its own context member.
    Deterministic; ignores the device argument.
    """

    name = "stub"

    def __init__(self, device: str = "cpu", seed: int = 0,
                 bandwidth_scale: float = 0.3):
        self.device = device
        self.seed = seed
        self.bandwidth_scale = bandwidth_scale
        self._ctx_X = None
        self._ctx_y = None
        self._n_classes = None
        self._h2 = None

    def condition(self, X: np.ndarray, y: np.ndarray, n_classes: int) -> None:
        if len(X) == 0:
            raise ModelError("empty context")
        self._ctx_X = np.asarray(X, dtype=np.float64)
        self._ctx_y = np.asarray(y, dtype=np.int64)
        self._n_classes = n_classes
        d2 = self._pairwise_sq(self._ctx_X, self._ctx_X)
        np.fill_diagonal(d2, np.inf)
        nn = np.sqrt(d2.min(axis=1))
        nn = nn[np.isfinite(nn)]
        scale = float(np.mean(nn)) if nn.size else 1.0
        self._h2 = max((self.bandwidth_scale * scale) ** 2, 1e-12)

    @staticmethod
    def _pairwise_sq(A: np.ndarray, B: np.ndarray) -> np.ndarray:
        return np.sum((A[:, None, :] - B[None, :, :]) ** 2, axis=2)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        if self._ctx_X is None:
            raise ModelError("model has not been conditioned on a context")
        X = np.asarray(X, dtype=np.float64)
        C = self._n_classes
        out = np.empty((len(X), C), dtype=np.float64)
        chunk = max(1, int(2e6) // max(1, len(self._ctx_X)))
        onehot = np.zeros((len(self._ctx_y), C))
        onehot[np.arange(len(self._ctx_y)), self._ctx_y] = 1.0
        for start in range(0, len(X), chunk):
            q = X[start:start + chunk]
            w = np.exp(-self._pairwise_sq(q, self._ctx_X) / (2.0 * self._h2))
            num = w @ onehot + 1e-12
            out[start:start + len(q)] = num / num.sum(axis=1, keepdims=True)
        return out


_EXTERNAL_IMPORTS = {
    "tabpfn": ("tabpfn", "TabPFNClassifier"),
    "tabicl": ("tabicl", "TabICLClassifier"),
}


class ExternalIclModel:
    """Adapter over an installed third-party in-context classifier."""

    def __init__(self, model_id: str, device: str = "cpu", seed: int = 0):
        module_name, class_name = _EXTERNAL_IMPORTS[model_id]
        try:
            module = __import__(module_name)
        except ImportError as exc:
            raise ModelError(
                f"model {model_id!r} needs the {module_name!r} package installed"
            ) from exc
        cls = getattr(module, class_name)
        self.name = model_id
        self._impl = cls(device=device)
        self._n_classes = None

    def condition(self, X, y, n_classes):
        self._n_classes = n_classes
        self._impl.fit(X, y)

    def predict_proba(self, X):
        probs = np.asarray(self._impl.predict_proba(X), dtype=np.float64)
        if probs.shape[1] != self._n_classes:
            raise ModelError(
                f"{self.name} returned {probs.shape[1]} classes, expected {self._n_classes}"
            )
        return probs


def available_models() -> list[str]:
    return ["stub", *sorted(_EXTERNAL_IMPORTS)]


def load_model(model_id: str, device: str = "cpu", seed: int = 0):
    if model_id == "stub":
        return StubIclModel(device=device, seed=seed)
    if model_id in _EXTERNAL_IMPORTS:
        return ExternalIclModel(model_id, device=device, seed=seed)
    raise ModelError(f"unknown model {model_id!r}; available: {available_models()}")
