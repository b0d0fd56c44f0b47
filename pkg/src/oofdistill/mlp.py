"""MLP student trained on the full mixed objective.

Training protocol: mini-batch gradient descent with linear warmup followed by
cosine decay to zero, inverted dropout, stochastic weight averaging over the
final fraction of epochs, and an entropy-collapse detector that restarts
training from a fresh seed-derived initialization at higher dropout when the
held-out prediction entropy pins near zero.

The input "embedding" is a per-feature affine lift to `embedding_dim`
followed by concatenation and projection; two hidden ReLU layers follow.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .labeling import SoftLabelSet
from .losses import LossConfig, mixed_loss, mixed_loss_grad
from .util import derive_seed, entropy_nats, softmax, stratified_holdout

_FORMAT = "oofdistill-mlp"
_VERSION = 1

PARAM_NAMES = ("emb_w", "emb_b", "proj_w", "proj_b", "hid_w", "hid_b", "out_w", "out_b")


class MlpError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpConfig:
    embedding_dim: int | None = None  # default min(8 * d, 128)
    hidden_width: int | None = None   # default clamp(4 * sqrt(N), 32, 256)
    epochs: int = 200
    warmup_fraction: float = 0.1
    base_lr: float = 1e-3
    dropout: float = 0.1
    swa_fraction: float = 0.2
    collapse_entropy_scale: float = 0.05  # threshold = scale * ln(C)
    collapse_patience: int = 3
    max_restarts: int = 2
    batch_size: int | None = None     # default min(256, N // 4)
    optimizer: str = "sgd"            # momentum-free by default; "adam" optional
    seed: int = 0
    keep_swa_snapshots: bool = False  # retain snapshots on the model (tests)

    def validate(self) -> None:
        for name in ("warmup_fraction", "swa_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise MlpError(f"{name} must be in (0, 1), got {v}")
        if self.epochs < 1 or self.base_lr <= 0:
            raise MlpError("epochs must be >= 1 and base_lr > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise MlpError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.collapse_patience < 1 or self.max_restarts < 0:
            raise MlpError("collapse_patience >= 1 and max_restarts >= 0 required")
        if self.optimizer not in ("sgd", "adam"):
            raise MlpError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")


@dataclass
class MlpModel:
    params: dict
    norm_mean: np.ndarray
    norm_std: np.ndarray
    n_features: int
    n_classes: int
    embedding_dim: int
    hidden_width: int
    swa_averaged: bool = False
    dropout_used: float = 0.0
    restarts_used: int = 0
    collapse_flagged: bool = False
    train_loss_: list = field(default_factory=list, repr=False)
    holdout_entropy_: list = field(default_factory=list, repr=False)
    swa_snapshots_: list | None = field(default=None, repr=False)


def swa_mean(snapshots: list[dict]) -> dict:
    """Arithmetic mean of parameter snapshots.

    Computed as a running mean (acc += (x - acc) / k), so averaging identical
    snapshots returns them bit-exactly.
    """
    if not snapshots:
        raise MlpError("no snapshots to average")
    acc = {k: v.copy() for k, v in snapshots[0].items()}
    for i, snap in enumerate(snapshots[1:], start=2):
        for k in acc:
            acc[k] += (snap[k] - acc[k]) / i
    return acc


def cosine_warmup_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to `base_lr`, then cosine decay to exactly 0."""
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    decay_steps = max(1, total_steps - warmup_steps)
    progress = (step - warmup_steps + 1) / decay_steps
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _init_params(d: int, E: int, H: int, C: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    return {
        "emb_w": rng.normal(0.0, 1.0, (d, E)),
        "emb_b": np.zeros((d, E)),
        "proj_w": rng.normal(0.0, math.sqrt(2.0 / (d * E)), (d * E, H)),
        "proj_b": np.zeros(H),
        "hid_w": rng.normal(0.0, math.sqrt(2.0 / H), (H, H)),
        "hid_b": np.zeros(H),
        # zero output layer: a fresh model predicts the uniform distribution
        "out_w": np.zeros((H, C)),
        "out_b": np.zeros(C),
    }


def _forward(params: dict, xs: np.ndarray, masks=None, keep: float = 1.0):
    """Forward pass; returns (logits, intermediates for backprop)."""
    n, d = xs.shape
    E = params["emb_w"].shape[1]
    lift = xs[:, :, None] * params["emb_w"][None, :, :] + params["emb_b"][None, :, :]
    flat = lift.reshape(n, d * E)
    h1 = np.maximum(flat @ params["proj_w"] + params["proj_b"], 0.0)
    h1d = h1 if masks is None else h1 * masks[0] / keep
    h2 = np.maximum(h1d @ params["hid_w"] + params["hid_b"], 0.0)
    h2d = h2 if masks is None else h2 * masks[1] / keep
    logits = h2d @ params["out_w"] + params["out_b"]
    return logits, (flat, h1, h1d, h2, h2d)


def _backward(params: dict, xs: np.ndarray, cache, grad_logits: np.ndarray,
              masks=None, keep: float = 1.0) -> dict:
    flat, h1, h1d, h2, h2d = cache
    n, d = xs.shape
    E = params["emb_w"].shape[1]
    g = {}
    g["out_w"] = h2d.T @ grad_logits
    g["out_b"] = grad_logits.sum(axis=0)
    gh2d = grad_logits @ params["out_w"].T
    gh2 = gh2d if masks is None else gh2d * masks[1] / keep
    gpre2 = gh2 * (h2 > 0)
    g["hid_w"] = h1d.T @ gpre2
    g["hid_b"] = gpre2.sum(axis=0)
    gh1d = gpre2 @ params["hid_w"].T
    gh1 = gh1d if masks is None else gh1d * masks[0] / keep
    gpre1 = gh1 * (h1 > 0)
    g["proj_w"] = flat.T @ gpre1
    g["proj_b"] = gpre1.sum(axis=0)
    gflat = gpre1 @ params["proj_w"].T
    glift = gflat.reshape(n, d, E)
    g["emb_w"] = (glift * xs[:, :, None]).sum(axis=0)
    g["emb_b"] = glift.sum(axis=0)
    return g


def _loss_and_grads(params: dict, xs: np.ndarray, soft: SoftLabelSet,
                    y: np.ndarray, loss_config: LossConfig,
                    masks=None, keep: float = 1.0):
    """Mixed loss and parameter gradients for one batch. Pure function of its
    arguments, which is what the finite-difference tests rely on."""
    logits, cache = _forward(params, xs, masks, keep)
    loss = mixed_loss(soft, softmax(logits), y, loss_config)
    grad_logits = mixed_loss_grad(soft, logits, y, loss_config)
    return loss, _backward(params, xs, cache, grad_logits, masks, keep)


def fit_mlp(features: np.ndarray, teacher: SoftLabelSet, hard_labels: np.ndarray,
            loss_config: LossConfig, config: MlpConfig) -> MlpModel:
    """Train the MLP student on the mixed objective."""
    config.validate()
    loss_config.validate()
    if not teacher.annotated:
        raise MlpError("soft labels are missing annotations; call annotate() first")
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(hard_labels, dtype=np.int64)
    n, d = X.shape
    C = teacher.n_classes
    if teacher.n_rows != n or len(y) != n:
        raise MlpError("features, soft labels, and hard labels must align")

    E = config.embedding_dim or min(8 * d, 128)
    H = config.hidden_width or int(np.clip(4.0 * math.sqrt(n), 32, 256))
    batch = config.batch_size or max(1, min(256, n // 4))
    batch = min(batch, n)

    holdout_frac = min(0.25, max(8, batch) / n) if n > 16 else 0.25
    tr_idx, ho_idx = stratified_holdout(y, holdout_frac, derive_seed(config.seed, "holdout"))
    mean = X[tr_idx].mean(axis=0)
    std = X[tr_idx].std(axis=0)
    std = np.where(std > 0, std, 1.0)
    Xs = (X - mean) / std
    Xtr, ytr = Xs[tr_idx], y[tr_idx]
    soft_tr = teacher.take(tr_idx)
    Xho, yho = Xs[ho_idx], y[ho_idx]
    soft_ho = teacher.take(ho_idx)

    n_tr = len(Xtr)
    steps_per_epoch = math.ceil(n_tr / batch)
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = max(1, int(round(config.warmup_fraction * total_steps)))
    n_swa = max(1, int(round(config.epochs * config.swa_fraction)))
    swa_start = config.epochs - n_swa
    collapse_threshold = config.collapse_entropy_scale * math.log(C)

    best_aborted = None  # (holdout_loss, params, restart_idx, dropout)
    for restart in range(config.max_restarts + 1):
        dropout = min(config.dropout + 0.1 * restart, 0.85)
        keep = 1.0 - dropout
        params = _init_params(d, E, H, C, derive_seed(config.seed, "init", restart))
        rng_order = np.random.default_rng(derive_seed(config.seed, "order", restart))
        rng_drop = np.random.default_rng(derive_seed(config.seed, "drop", restart))
        adam_m = {k: np.zeros_like(v) for k, v in params.items()}
        adam_v = {k: np.zeros_like(v) for k, v in params.items()}
        adam_t = 0

        snapshots: list[dict] = []
        collapse_streak = 0
        collapsed = False
        train_losses: list[float] = []
        holdout_entropies: list[float] = []
        step = 0
        for epoch in range(config.epochs):
            perm = rng_order.permutation(n_tr)
            epoch_loss = 0.0
            for start in range(0, n_tr, batch):
                idx = perm[start:start + batch]
                if dropout > 0.0:
                    masks = (
                        (rng_drop.random((len(idx), H)) < keep).astype(np.float64),
                        (rng_drop.random((len(idx), H)) < keep).astype(np.float64),
                    )
                else:
                    masks = None
                lr = cosine_warmup_lr(step, total_steps, warmup_steps, config.base_lr)
                try:
                    loss, grads = _loss_and_grads(
                        params, Xtr[idx], soft_tr.take(idx), ytr[idx],
                        loss_config, masks, keep,
                    )
                except Exception as exc:
                    raise MlpError(
                        f"training step failed at restart {restart}, epoch {epoch}, "
                        f"step {step} (lr={lr:.3g}): {exc}"
                    ) from exc
                if not np.isfinite(loss):
                    raise MlpError(
                        f"non-finite loss at restart {restart}, epoch {epoch}, "
                        f"step {step} (lr={lr:.3g})"
                    )
                if config.optimizer == "adam":
                    adam_t += 1
                    for k in params:
                        adam_m[k] = 0.9 * adam_m[k] + 0.1 * grads[k]
                        adam_v[k] = 0.999 * adam_v[k] + 0.001 * grads[k] ** 2
                        mhat = adam_m[k] / (1 - 0.9**adam_t)
                        vhat = adam_v[k] / (1 - 0.999**adam_t)
                        params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + 1e-8)
                else:
                    for k in params:
                        params[k] = params[k] - lr * grads[k]
                epoch_loss += loss
                step += 1
            train_losses.append(epoch_loss / steps_per_epoch)

            logits_ho, _ = _forward(params, Xho)
            mean_entropy = float(entropy_nats(softmax(logits_ho)).mean())
            holdout_entropies.append(mean_entropy)
            if mean_entropy < collapse_threshold:
                collapse_streak += 1
            else:
                collapse_streak = 0
            if collapse_streak >= config.collapse_patience:
                collapsed = True
                break

            if epoch >= swa_start:
                snapshots.append({k: v.copy() for k, v in params.items()})

        if not collapsed:
            final = swa_mean(snapshots) if snapshots else params
            return MlpModel(
                params=final, norm_mean=mean, norm_std=std,
                n_features=d, n_classes=C, embedding_dim=E, hidden_width=H,
                swa_averaged=bool(snapshots), dropout_used=dropout,
                restarts_used=restart, collapse_flagged=False,
                train_loss_=train_losses, holdout_entropy_=holdout_entropies,
                swa_snapshots_=snapshots if config.keep_swa_snapshots else None,
            )
        ho_loss = mixed_loss(soft_ho, softmax(_forward(params, Xho)[0]), yho, loss_config)
        if best_aborted is None or ho_loss < best_aborted[0]:
            best_aborted = (ho_loss, {k: v.copy() for k, v in params.items()},
                            restart, dropout, train_losses, holdout_entropies)

    _, params, restart, dropout, train_losses, holdout_entropies = best_aborted
    return MlpModel(
        params=params, norm_mean=mean, norm_std=std,
        n_features=d, n_classes=C, embedding_dim=E, hidden_width=H,
        swa_averaged=False, dropout_used=dropout,
        restarts_used=config.max_restarts, collapse_flagged=True,
        train_loss_=train_losses, holdout_entropy_=holdout_entropies,
    )


def predict_mlp(model: MlpModel, features: np.ndarray) -> np.ndarray:
    """Deterministic inference: dropout off, training normalization stats."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise MlpError(f"feature matrix {X.shape} does not match d={model.n_features}")
    xs = (X - model.norm_mean) / model.norm_std
    logits, _ = _forward(model.params, xs)
    return softmax(logits)


def save_mlp(model: MlpModel, path) -> None:
    doc = {
        "format": _FORMAT,
        "version": _VERSION,
        "params": {k: model.params[k].tolist() for k in PARAM_NAMES},
        "norm_mean": model.norm_mean.tolist(),
        "norm_std": model.norm_std.tolist(),
        "n_features": model.n_features,
        "n_classes": model.n_classes,
        "embedding_dim": model.embedding_dim,
        "hidden_width": model.hidden_width,
        "swa_averaged": model.swa_averaged,
        "dropout_used": model.dropout_used,
        "restarts_used": model.restarts_used,
        "collapse_flagged": model.collapse_flagged,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_mlp(path) -> MlpModel:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != _FORMAT or doc.get("version") != _VERSION:
        raise MlpError(f"{path}: not a {_FORMAT} v{_VERSION} file")
    params = {k: np.asarray(doc["params"][k], dtype=np.float64) for k in PARAM_NAMES}
    return MlpModel(
        params=params,
        norm_mean=np.asarray(doc["norm_mean"], dtype=np.float64),
        norm_std=np.asarray(doc["norm_std"], dtype=np.float64),
        n_features=doc["n_features"],
        n_classes=doc["n_classes"],
        embedding_dim=doc["embedding_dim"],
        hidden_width=doc["hidden_width"],
        swa_averaged=doc["swa_averaged"],
        dropout_used=doc["dropout_used"],
        restarts_used=doc["restarts_used"],
        collapse_flagged=doc["collapse_flagged"],
    )
