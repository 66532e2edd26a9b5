"""Ranking metrics, the inverse-propensity model, and test-time top-k.

Propensity-scored metrics divide each hit by the label's propensity and
normalize by the best value the same sum can reach over the query's own
positives, so reported values stay in [0, 1]. Rows without positives are
excluded from every average (the exclusion count is reported).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import anns
from .classifiers import ClassifierBank, ScoredLabels
from .encoder import EncoderParams, embed_batch
from .errors import ConfigError

DEFAULT_KS = (1, 3, 5)


@dataclass
class PropensityModel:
    propensities: np.ndarray  # per-label p in (0, 1]
    A: float
    B: float


@dataclass
class MetricsReport:
    p_at: dict = field(default_factory=dict)
    ndcg_at: dict = field(default_factory=dict)
    psp_at: dict = field(default_factory=dict)
    psn_at: dict = field(default_factory=dict)
    n_evaluated: int = 0
    n_excluded: int = 0

    def to_json(self, path=None):
        doc = {}
        for name, table in (("p_at", self.p_at), ("ndcg_at", self.ndcg_at), ("psp_at", self.psp_at), ("psn_at", self.psn_at)):
            for k, v in sorted(table.items()):
                doc[f"{name}_{k}"] = v
        doc["n_evaluated"] = self.n_evaluated
        doc["n_excluded"] = self.n_excluded
        if path is None:
            return doc
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)


def precision_at_k(ranked_ids, positives, k: int) -> float:
    ranked = np.asarray(ranked_ids)[:k]
    if len(ranked) < k:
        raise ConfigError(f"need at least {k} ranked predictions")
    pos = set(int(x) for x in positives)
    return sum(int(r) in pos for r in ranked) / k


def _dcg(rel: np.ndarray) -> float:
    return float((rel / np.log2(np.arange(2, len(rel) + 2))).sum())


def ndcg_at_k(ranked_ids, positives, k: int) -> float:
    ranked = np.asarray(ranked_ids)[:k]
    if len(ranked) < k:
        raise ConfigError(f"need at least {k} ranked predictions")
    pos = set(int(x) for x in positives)
    if not pos:
        return 0.0
    rel = np.array([int(r) in pos for r in ranked], dtype=np.float64)
    ideal = np.ones(min(k, len(pos)))
    return _dcg(rel) / _dcg(ideal)


def fit_propensity(label_frequency, N: int, A: float = 0.55, B: float = 1.5) -> PropensityModel:
    """p = 1 / (1 + C * exp(-A * log(n + B))) with C = (log N - 1)(B+1)^A."""
    freq = np.asarray(label_frequency, dtype=np.float64)
    if N < 2:
        raise ConfigError("propensity model needs N >= 2")
    if (freq < 0).any():
        raise ConfigError("label frequencies must be nonnegative")
    C = (np.log(N) - 1.0) * (B + 1.0) ** A
    p = 1.0 / (1.0 + C * np.exp(-A * np.log(freq + B)))
    return PropensityModel(p, A, B)


def psp_at_k(ranked_ids, positives, propensity: PropensityModel, k: int) -> float:
    """Propensity-scored precision, normalized by this query's ideal value."""
    ranked = np.asarray(ranked_ids)[:k]
    if len(ranked) < k:
        raise ConfigError(f"need at least {k} ranked predictions")
    p = propensity.propensities
    if ranked.max(initial=0) >= len(p):
        raise ConfigError("propensity model does not cover all predicted labels")
    pos = set(int(x) for x in positives)
    if not pos:
        return 0.0
    got = sum(1.0 / p[int(r)] for r in ranked if int(r) in pos) / k
    inv = np.sort([1.0 / p[l] for l in pos])[::-1][:k]
    ideal = inv.sum() / k
    return float(got / ideal)


def psn_at_k(ranked_ids, positives, propensity: PropensityModel, k: int) -> float:
    """Propensity-scored nDCG variant (log2 discounts on the weighted hits)."""
    ranked = np.asarray(ranked_ids)[:k]
    if len(ranked) < k:
        raise ConfigError(f"need at least {k} ranked predictions")
    p = propensity.propensities
    pos = set(int(x) for x in positives)
    if not pos:
        return 0.0
    rel = np.array([(1.0 / p[int(r)]) if int(r) in pos else 0.0 for r in ranked])
    inv = np.sort([1.0 / p[l] for l in pos])[::-1][: min(k, len(pos))]
    ideal = _dcg(inv)
    return float(_dcg(rel) / ideal)


def predict_topk(
    encoder: EncoderParams,
    bank_or_index,
    query_row,
    k: int,
    mode: str = "exact",
    query_beam: int = 128,
) -> ScoredLabels:
    """Embed one query row and rank labels; exact full scan or index query."""
    from .encoder import embed

    emb = embed(encoder, query_row)
    if mode == "exact":
        bank: ClassifierBank = bank_or_index
        if k > bank.n_labels:
            raise ConfigError("k exceeds the label count")
        scores = (bank.weights @ emb).astype(np.float64)
        order = np.lexsort((np.arange(len(scores)), -scores))[:k]
        return ScoredLabels(order.astype(np.int64), scores[order])
    if mode == "anns":
        return anns.query_topk(bank_or_index, emb, k, query_beam)
    raise ConfigError(f"unknown prediction mode {mode!r}")


def evaluate(
    dataset,
    encoder: EncoderParams,
    bank: ClassifierBank,
    ks=DEFAULT_KS,
    mode: str = "exact",
    propensity: PropensityModel | None = None,
    anns_params: dict | None = None,
) -> MetricsReport:
    """Aggregate all metrics over the split's rows with nonempty positives."""
    ks = tuple(sorted(set(int(k) for k in ks)))
    if ks[-1] > dataset.n_labels:
        raise ConfigError("k exceeds the label count")
    if propensity is None:
        stats = dataset.stats()
        propensity = fit_propensity(stats.label_frequency, max(dataset.n_points, 2))

    emb = embed_batch(encoder, dataset.features)
    if mode == "exact":
        scores = emb @ bank.weights.T
        kmax = ks[-1]
        ranked_all = np.argsort(-scores.astype(np.float64), axis=1, kind="stable")[:, :kmax]
    elif mode == "anns":
        params = anns_params or {}
        index = anns.build_approx(
            bank.weights,
            params.get("max_degree", 32),
            params.get("build_beam", 64),
            seed=params.get("seed", 0),
        )
        beam = params.get("query_beam", 128)
        ranked_all = np.stack(
            [anns.query_topk(index, emb[i], ks[-1], beam).label_ids for i in range(dataset.n_points)]
        )
    else:
        raise ConfigError(f"unknown evaluation mode {mode!r}")

    report = MetricsReport(
        p_at={k: 0.0 for k in ks},
        ndcg_at={k: 0.0 for k in ks},
        psp_at={k: 0.0 for k in ks},
        psn_at={k: 0.0 for k in ks},
    )
    for i in range(dataset.n_points):
        pos = dataset.positives[i]
        if len(pos) == 0:
            report.n_excluded += 1
            continue
        report.n_evaluated += 1
        ranked = ranked_all[i]
        for k in ks:
            report.p_at[k] += precision_at_k(ranked, pos, k)
            report.ndcg_at[k] += ndcg_at_k(ranked, pos, k)
            report.psp_at[k] += psp_at_k(ranked, pos, propensity, k)
            report.psn_at[k] += psn_at_k(ranked, pos, propensity, k)
    if report.n_evaluated:
        for table in (report.p_at, report.ndcg_at, report.psp_at, report.psn_at):
            for k in ks:
                table[k] /= report.n_evaluated
    return report
