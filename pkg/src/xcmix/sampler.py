"""Per-query label slates: positives, hard negatives, random negatives.

A slate concatenates k_p positive slots (padded with random labels at
mask 0 when a row has too few positives), hard-negative slots sourced
from a cache or a freshly built index depending on the strategy, and
uniform random-negative slots drawn with replacement from the non-hard
labels. Slot weights follow the loss module's estimator coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import anns
from .encoder import EncoderParams, embed_batch
from .errors import ConfigError
from .loss import ORIGIN_HARD, ORIGIN_PAD, ORIGIN_POS, ORIGIN_RAND

STRATEGY_KINDS = (
    "RandomOnly",
    "StaleHard",
    "UpToDateHard",
    "Mixture",
    "CurriculumMixture",
    "LabelEmbHard",
    "LabelEmbMixture",
)

_HARD_ONLY = {"StaleHard", "UpToDateHard", "LabelEmbHard"}
_MIXTURES = {"Mixture", "LabelEmbMixture"}


@dataclass
class SamplerStrategy:
    kind: str
    k_p: int = 3
    k_h: int = 10
    k_r: int = 30
    curriculum_ramp: int = 20

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown sampler strategy {self.kind!r}")
        if self.k_p < 1 or self.k_h < 0 or self.k_r < 1:
            raise ConfigError("need k_p >= 1, k_h >= 0, k_r >= 1")
        if self.kind == "CurriculumMixture" and self.curriculum_ramp < 1:
            raise ConfigError("curriculum ramp must be >= 1")

    @property
    def uses_hard_negatives(self) -> bool:
        return self.kind != "RandomOnly"

    @property
    def needs_label_features(self) -> bool:
        return self.kind in ("LabelEmbHard", "LabelEmbMixture")

    @property
    def slate_size(self) -> int:
        return self.k_p + self.k_h + self.k_r


@dataclass
class LabelSlate:
    label_ids: np.ndarray
    y_mask: np.ndarray
    weights: np.ndarray
    origin: np.ndarray  # loss-module origin codes per slot


@dataclass
class SlateCaches:
    """Inputs a strategy may consult, plus instrumentation counters."""

    negative_cache: anns.NegativeCache | None = None
    live_index: anns.AnnsIndex | None = None  # rebuilt each iteration (oracle arm)
    index_queries: int = 0
    cache_reads: int = 0


def curriculum_counts(epoch: int, strategy: SamplerStrategy, tau_s: int) -> tuple[int, int]:
    """Effective (hard, random) slot counts for this epoch; total is constant."""
    total = strategy.k_h + strategy.k_r
    if epoch < tau_s or strategy.kind == "RandomOnly":
        return 0, total
    if strategy.kind in _HARD_ONLY:
        return total, 0
    if strategy.kind in _MIXTURES:
        return strategy.k_h, strategy.k_r
    # CurriculumMixture: linear ramp of the hard count over the window
    frac = min(1.0, (epoch - tau_s) / strategy.curriculum_ramp)
    k_h_eff = int(round(strategy.k_h * frac))
    return k_h_eff, total - k_h_eff


def build_positive_slots(positives: np.ndarray, k_p: int, L: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """k_p label ids with a 0/1 mask; short rows get random non-positive pads."""
    positives = np.asarray(positives, dtype=np.int64)
    n = len(positives)
    if n >= k_p:
        ids = rng.choice(positives, size=k_p, replace=False)
        return ids, np.ones(k_p, dtype=np.int8)
    pads = np.empty(k_p - n, dtype=np.int64)
    pos_set = set(positives.tolist())
    for i in range(k_p - n):
        while True:
            cand = int(rng.integers(0, L))
            if cand not in pos_set:
                pads[i] = cand
                break
    ids = np.concatenate([positives, pads])
    mask = np.concatenate([np.ones(n, dtype=np.int8), np.zeros(k_p - n, dtype=np.int8)])
    return ids, mask


def sample_random_negatives(L: int, hard_set, k_r: int, rng) -> np.ndarray:
    """k_r i.i.d. uniform draws (with replacement) from [L] minus the hard set."""
    hard = np.unique(np.asarray(list(hard_set), dtype=np.int64))
    if len(hard) >= L:
        raise ConfigError("hard set covers the whole label space")
    if k_r < 1:
        raise ConfigError("k_r must be >= 1")
    v = rng.integers(0, L - len(hard), size=k_r)
    if len(hard) == 0:
        return v.astype(np.int64)
    # rank->value map over the complement of the sorted hard set
    shifted = hard - np.arange(len(hard))
    return (v + np.searchsorted(shifted, v, side="right")).astype(np.int64)


def _hard_row(strategy, row_positives, k_h_eff, caches: SlateCaches, row_id, embedding) -> np.ndarray:
    if strategy.kind == "UpToDateHard":
        if caches.live_index is None:
            raise ConfigError("UpToDateHard needs a live index rebuilt this iteration")
        caches.index_queries += 1
        sl = anns.query_topk(caches.live_index, embedding, min(caches.live_index.size, k_h_eff + len(row_positives)))
        mask = ~np.isin(sl.label_ids, row_positives)
        return sl.label_ids[mask][:k_h_eff]
    if caches.negative_cache is None:
        raise ConfigError(f"strategy {strategy.kind} needs a negative cache")
    caches.cache_reads += 1
    return caches.negative_cache.ids[row_id][:k_h_eff].astype(np.int64)


def assemble_slate(
    strategy: SamplerStrategy,
    row_positives: np.ndarray,
    epoch: int,
    caches: SlateCaches,
    rng,
    L: int,
    tau_s: int,
    row_id: int = 0,
    embedding: np.ndarray | None = None,
) -> LabelSlate:
    """One query's slate under the strategy's schedule for this epoch.

    Before tau_s every strategy degenerates to random-only slates.
    """
    row_positives = np.asarray(row_positives, dtype=np.int64)
    k_h_eff, k_r_eff = curriculum_counts(epoch, strategy, tau_s)
    pos_ids, pos_mask = build_positive_slots(row_positives, strategy.k_p, L, rng)

    hard = np.empty(0, dtype=np.int64)
    if k_h_eff > 0:
        hard = _hard_row(strategy, row_positives, k_h_eff, caches, row_id, embedding)
        k_h_eff = len(hard)
    rand = np.empty(0, dtype=np.int64)
    if k_r_eff > 0:
        rand = sample_random_negatives(L, hard, k_r_eff, rng)

    ids = np.concatenate([pos_ids, hard, rand])
    origin = np.concatenate(
        [
            np.where(pos_mask == 1, ORIGIN_POS, ORIGIN_PAD).astype(np.int8),
            np.full(len(hard), ORIGIN_HARD, dtype=np.int8),
            np.full(len(rand), ORIGIN_RAND, dtype=np.int8),
        ]
    )
    pos_set = set(row_positives.tolist())
    y = np.fromiter((1 if int(i) in pos_set else 0 for i in ids), dtype=np.int8, count=len(ids))
    weights = np.ones(len(ids), dtype=np.float64)
    if k_r_eff > 0:
        weights[origin == ORIGIN_RAND] = (L - k_h_eff) / k_r_eff
    return LabelSlate(ids, y, weights, origin)


def retrieve_label_embedding_hard(
    encoder_params: EncoderParams,
    label_features,
    embeddings: np.ndarray,
    positives: list,
    k_h: int,
    snapshot_epoch: int = 0,
) -> anns.NegativeCache:
    """Hard negatives scored against encoded label features instead of
    classifier rows (the misaligned-baseline arm)."""
    if label_features is None:
        raise ConfigError("label-embedding strategies need label features")
    label_embs = embed_batch(encoder_params, label_features)
    index = anns.build_exact(label_embs, snapshot_epoch=snapshot_epoch)
    return anns.retrieve_hard_negatives(index, embeddings, positives, k_h)
