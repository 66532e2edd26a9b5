"""Inner-product top-k retrieval over classifier rows.

Two index kinds share one query interface: an exact full-scan index (the
recall oracle) and a navigable-graph index built by incremental insertion
with beam search, in the greedy-search family. Ties always break toward
the lower label id so results are deterministic.

Indexes snapshot their vectors at build time; later updates to the source
matrix never affect an existing index.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericalError

_CACHE_MAGIC = b"XNCF"
_CACHE_VERSION = 1

STAGE_IDLE = "idle"
STAGE_SAVE = "save_embeddings"
STAGE_BUILD = "build_retrieve"
STAGE_CONSUME = "consume_new"


@dataclass
class AnnsIndex:
    kind: str  # "exact" | "approx-graph"
    vectors: np.ndarray  # M x d snapshot copy
    snapshot_epoch: int = 0
    graph: list | None = None  # per-node out-neighbor id arrays (approx only)
    entry_point: int = 0

    @property
    def size(self) -> int:
        return self.vectors.shape[0]


@dataclass
class NegativeCache:
    ids: np.ndarray  # N x k_h label ids
    built_from_epoch: int

    @property
    def n_queries(self) -> int:
        return self.ids.shape[0]

    @property
    def k_h(self) -> int:
        return self.ids.shape[1]


@dataclass
class RefreshSchedule:
    tau_s: int  # first epoch that consumes hard negatives
    tau_r: int  # epochs between refreshes

    def __post_init__(self):
        if self.tau_s < 1 or self.tau_r < 1:
            raise ConfigError("tau_s and tau_r must be >= 1")

    def is_consume_epoch(self, epoch: int) -> bool:
        return epoch >= self.tau_s and (epoch - self.tau_s) % self.tau_r == 0

    def is_build_epoch(self, epoch: int) -> bool:
        return self.is_consume_epoch(epoch + 1)

    def is_save_epoch(self, epoch: int) -> bool:
        return self.is_consume_epoch(epoch + 2)


def plan_refresh(epoch: int, schedule: RefreshSchedule) -> str:
    """Pipeline stage for an epoch: the new-cache consumers win ties."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    if schedule.is_consume_epoch(epoch):
        return STAGE_CONSUME
    if schedule.is_build_epoch(epoch):
        return STAGE_BUILD
    if schedule.is_save_epoch(epoch):
        return STAGE_SAVE
    return STAGE_IDLE


def _check_vectors(vectors: np.ndarray) -> np.ndarray:
    vectors = np.ascontiguousarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or vectors.shape[0] < 1:
        raise ConfigError("index needs a nonempty M x d matrix")
    if not np.isfinite(vectors).all():
        raise NumericalError("non-finite vectors in index build")
    return vectors.copy()


def build_exact(vectors: np.ndarray, snapshot_epoch: int = 0) -> AnnsIndex:
    return AnnsIndex(kind="exact", vectors=_check_vectors(vectors), snapshot_epoch=snapshot_epoch)


def _topk_by_score(scores: np.ndarray, k: int) -> np.ndarray:
    """ids of the k largest scores, ties toward lower id."""
    if k >= len(scores):
        return np.lexsort((np.arange(len(scores)), -scores))[:k]
    kth = np.partition(scores, len(scores) - k)[len(scores) - k]
    cand = np.flatnonzero(scores >= kth)
    return cand[np.lexsort((cand, -scores[cand]))][:k]


def _batched_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k ids, descending score, ties toward lower id.

    Selects k + a small buffer per row with argpartition, sorts only those,
    and falls back to the per-row oracle for rows where an exact score tie
    crosses the selection boundary.
    """
    N, M = scores.shape
    if k >= M:
        return np.vstack([_topk_by_score(scores[i].astype(np.float64), k) for i in range(N)])
    m = min(k + 8, M - 1)
    part = np.argpartition(-scores, m, axis=1)
    cand = np.sort(part[:, :m], axis=1)  # ascending ids so a stable sort tie-breaks low
    cand_scores = np.take_along_axis(scores, cand, axis=1)
    order = np.argsort(-cand_scores, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(cand, order, axis=1)
    kth = np.take_along_axis(cand_scores, order[:, -1:], axis=1)[:, 0]
    boundary = np.take_along_axis(scores, part[:, m : m + 1], axis=1)[:, 0]
    risky = np.flatnonzero(kth <= boundary)
    for i in risky:
        top[i] = _topk_by_score(scores[i].astype(np.float64), k)
    return top


def _beam_search(index: AnnsIndex, query: np.ndarray, beam: int) -> tuple[np.ndarray, np.ndarray]:
    """Greedy beam search; returns (visited ids, their scores)."""
    vecs = index.vectors
    start = index.entry_point
    visited = {start}
    s0 = float(vecs[start] @ query)
    # heap of (-score, id) candidates; result list kept as min-heap of (score, -id)
    cand = [(-s0, start)]
    result = [(s0, -start)]
    scores = {start: s0}
    while cand:
        negs, node = heapq.heappop(cand)
        if len(result) >= beam and -negs < result[0][0]:
            break
        neigh = index.graph[node]
        fresh = [n for n in neigh if n not in visited]
        if not fresh:
            continue
        visited.update(fresh)
        ss = vecs[fresh] @ query
        for n, s in zip(fresh, ss):
            s = float(s)
            scores[n] = s
            if len(result) < beam or s > result[0][0]:
                heapq.heappush(cand, (-s, n))
                heapq.heappush(result, (s, -n))
                if len(result) > beam:
                    heapq.heappop(result)
    ids = np.fromiter(scores.keys(), dtype=np.int64, count=len(scores))
    ss = np.fromiter(scores.values(), dtype=np.float64, count=len(scores))
    return ids, ss


def build_approx(
    vectors: np.ndarray,
    max_degree: int = 32,
    build_beam: int = 64,
    seed: int = 0,
    snapshot_epoch: int = 0,
) -> AnnsIndex:
    """Incremental-insertion navigable graph under inner product.

    Each new node links to the top-``max_degree`` nodes (by similarity)
    found by a beam search over the current graph, with reverse edges
    pruned back to ``max_degree`` by similarity order. Deterministic given
    the seed and insertion order.
    """
    if max_degree < 2:
        raise ConfigError("max_degree must be >= 2")
    vectors = _check_vectors(vectors)
    M = vectors.shape[0]
    rng = np.random.default_rng(seed)
    order = rng.permutation(M)

    graph: list[np.ndarray] = [np.empty(0, dtype=np.int64) for _ in range(M)]
    index = AnnsIndex(
        kind="approx-graph", vectors=vectors, snapshot_epoch=snapshot_epoch,
        graph=graph, entry_point=int(order[0]),
    )
    for node in order[1:]:
        node = int(node)
        q = vectors[node].astype(np.float64)
        ids, scores = _beam_search(index, q, build_beam)
        keep = ids[np.lexsort((ids, -scores))][:max_degree]
        graph[node] = keep.astype(np.int64)
        for nb in keep:
            nb = int(nb)
            merged = np.append(graph[nb], node)
            if len(merged) > max_degree:
                ss = vectors[merged] @ vectors[nb]
                merged = merged[np.lexsort((merged, -ss))][:max_degree]
            graph[nb] = merged
    return index


def query_topk(index: AnnsIndex, query: np.ndarray, k: int, query_beam: int = 128) -> "ScoredLabels":
    """Top-k ids by inner product, descending, ties toward lower id."""
    from .classifiers import ScoredLabels

    if k > index.size:
        raise ConfigError(f"k={k} exceeds index size {index.size}")
    q = np.asarray(query, dtype=np.float64)
    if index.kind == "exact":
        scores = index.vectors @ q
        ids = _topk_by_score(scores, k)
        return ScoredLabels(ids.astype(np.int64), scores[ids])
    beam = max(query_beam, k)
    if beam >= index.size:
        # a beam covering the whole index is an exhaustive scan
        scores = index.vectors @ q
        ids = _topk_by_score(scores, k)
        return ScoredLabels(ids.astype(np.int64), scores[ids])
    ids, scores = _beam_search(index, q, beam)
    order = np.lexsort((ids, -scores))[:k]
    return ScoredLabels(ids[order], scores[order])


def retrieve_hard_negatives(
    index: AnnsIndex,
    embeddings: np.ndarray,
    positives: list,
    k_h: int,
    query_beam: int = 128,
) -> NegativeCache:
    """Per query: top (k_h + |positives|), drop the positives, keep k_h.

    The exact path is batched as one matrix product; the graph path runs
    one beam search per query. Results carry the index's snapshot epoch.
    """
    N = embeddings.shape[0]
    if k_h == 0:
        return NegativeCache(np.empty((N, 0), dtype=np.int32), index.snapshot_epoch)
    max_pos = max((len(p) for p in positives), default=0)
    if k_h + max_pos > index.size:
        raise ConfigError("k_h plus the positive count exceeds the label count")
    out = np.empty((N, k_h), dtype=np.int32)
    if index.kind == "exact":
        scores = embeddings @ index.vectors.T
        pos_rows = np.repeat(np.arange(N), [len(p) for p in positives])
        scores[pos_rows, np.concatenate(positives) if len(pos_rows) else []] = -np.inf
        out[:] = _batched_topk(scores, k_h)
    else:
        for i in range(N):
            sl = query_topk(index, embeddings[i], k_h + len(positives[i]), query_beam)
            mask = ~np.isin(sl.label_ids, positives[i])
            kept = sl.label_ids[mask][:k_h]
            if len(kept) < k_h:
                # beam missed too many; backfill from a wider search
                wider = query_topk(index, embeddings[i], min(index.size, 4 * (k_h + len(positives[i]))), 4 * query_beam)
                mask = ~np.isin(wider.label_ids, positives[i])
                kept = wider.label_ids[mask][:k_h]
            out[i] = kept
    return NegativeCache(out, index.snapshot_epoch)


def measure_recall(
    approx_index: AnnsIndex, exact_index: AnnsIndex, queries: np.ndarray, k: int, query_beam: int = 128
) -> float:
    """Mean |approx top-k  intersect  exact top-k| / k over the queries."""
    if approx_index.snapshot_epoch != exact_index.snapshot_epoch or approx_index.vectors.shape != exact_index.vectors.shape:
        raise ConfigError("indexes were built from different snapshots")
    if not np.array_equal(approx_index.vectors, exact_index.vectors):
        raise ConfigError("indexes were built from different snapshots")
    total = 0.0
    for q in queries:
        a = query_topk(approx_index, q, k, query_beam).label_ids
        e = query_topk(exact_index, q, k).label_ids
        total += len(np.intersect1d(a, e)) / k
    return total / len(queries)


def save_negative_cache(cache: NegativeCache, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<I", _CACHE_VERSION))
        fh.write(struct.pack("<QII", cache.n_queries, cache.k_h, cache.built_from_epoch))
        fh.write(np.ascontiguousarray(cache.ids, dtype="<u4").tobytes())


def load_negative_cache(path) -> NegativeCache:
    with open(path, "rb") as fh:
        if fh.read(4) != _CACHE_MAGIC:
            raise DataError("bad negative-cache magic")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CACHE_VERSION:
            raise DataError(f"unsupported negative-cache version {version}")
        n, k_h, epoch = struct.unpack("<QII", fh.read(16))
        ids = np.frombuffer(fh.read(4 * n * k_h), dtype="<u4").astype(np.int32).reshape(n, k_h)
    return NegativeCache(ids, epoch)
