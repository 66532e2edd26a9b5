"""Per-label one-vs-all classifier vectors and their sparse SGD updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError


@dataclass
class ClassifierBank:
    weights: np.ndarray  # L x d, float32 row per label
    l2_reg: float = 0.0

    @property
    def n_labels(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class ScoredLabels:
    label_ids: np.ndarray
    scores: np.ndarray


def init_classifiers(L: int, d: int, scheme: str, seed: int, l2_reg: float = 0.0) -> ClassifierBank:
    if L <= 0 or d <= 0:
        raise ConfigError("classifier dimensions must be positive")
    if scheme == "zeros":
        w = np.zeros((L, d), dtype=np.float32)
    elif scheme == "uniform-scaled":
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(d)
        w = rng.uniform(-bound, bound, size=(L, d)).astype(np.float32)
    else:
        raise ConfigError(f"unknown init scheme {scheme!r}")
    return ClassifierBank(w, l2_reg)


def score_labels(bank: ClassifierBank, embedding: np.ndarray, label_ids) -> ScoredLabels:
    ids = np.asarray(label_ids, dtype=np.int64)
    if len(ids) and (ids.min() < 0 or ids.max() >= bank.n_labels):
        raise ConfigError("label id out of range")
    scores = bank.weights[ids] @ np.asarray(embedding, dtype=np.float32)
    return ScoredLabels(ids, scores)


def score_all(bank: ClassifierBank, embedding: np.ndarray) -> np.ndarray:
    return bank.weights @ np.asarray(embedding, dtype=np.float32)


def apply_classifier_updates(
    bank: ClassifierBank, sparse_grad: dict, lr: float, weight_decay: float = 0.0
) -> None:
    """SGD step on the touched rows only: w <- w - lr * (g + wd * w).

    Decay is lazy: untouched rows are left as-is so the per-step cost stays
    proportional to the slate size, not L.
    """
    if not sparse_grad:
        return
    ids = np.fromiter(sparse_grad.keys(), dtype=np.int64, count=len(sparse_grad))
    if ids.min() < 0 or ids.max() >= bank.n_labels:
        raise ConfigError("label id out of range in update")
    grads = np.stack([np.asarray(sparse_grad[int(i)], dtype=np.float32) for i in ids])
    apply_classifier_updates_arrays(bank, ids, grads, lr, weight_decay)


def apply_classifier_updates_arrays(
    bank: ClassifierBank, ids: np.ndarray, grads: np.ndarray, lr: float, weight_decay: float = 0.0
) -> None:
    """Array form of apply_classifier_updates; ids must be unique."""
    if not np.isfinite(grads).all():
        raise NumericalError("non-finite classifier gradient")
    rows = bank.weights[ids]
    bank.weights[ids] = rows - np.float32(lr) * (grads + np.float32(weight_decay) * rows)
