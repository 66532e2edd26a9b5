"""BCE objective over all labels and its sampled-slate estimator.

The full objective for one query with scores s and 0/1 targets y is

    sum_{y=1} log(1 + exp(-s))  +  sum_{y=0} (s + log(1 + exp(-s))).

The slate estimator evaluates the positive part on the query's positive
slots, the negative part unweighted on hard-negative slots, and the
negative part on k_r uniform draws from the non-hard labels reweighted by
(L - k_h) / k_r. The uniform draws are taken with replacement and true
positives among them are neutralized by the (1 - y) factor, which is what
makes the estimator's expectation equal the full loss.

Slot origin codes: 0 = positive, 1 = hard negative, 2 = random negative,
3 = padding (a positive slot backfilled with a random label; behaves as an
unweighted negative).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError

ORIGIN_POS = 0
ORIGIN_HARD = 1
ORIGIN_RAND = 2
ORIGIN_PAD = 3

# Beyond this |s|, exp(-|s|) underflows float32 harmlessly.
_CLAMP = 30.0


def softplus(s: np.ndarray) -> np.ndarray:
    """log(1 + exp(s)), stable over the whole float range.

    logaddexp saturates to s above the clamp threshold (exp(-s) underflows
    harmlessly) and to 0 below it, so no explicit clipping is needed.
    """
    return np.logaddexp(0.0, np.asarray(s, dtype=np.float64))


def sigmoid(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * s))


@dataclass
class LossBreakdown:
    positive_part: float
    hard_negative_part: float
    random_negative_part_weighted: float

    @property
    def total(self) -> float:
        return self.positive_part + self.hard_negative_part + self.random_negative_part_weighted


@dataclass
class SlateGradients:
    per_label: dict  # label id -> d-vector
    wrt_embedding: np.ndarray


def full_bce_loss(scores: np.ndarray, positives) -> float:
    """Full objective over all L labels; positives is a set/array of ids."""
    s = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(s).all():
        raise NumericalError("non-finite score")
    pos = np.zeros(len(s), dtype=bool)
    pos[np.asarray(list(positives), dtype=np.int64)] = True
    # positive term log(1+e^{-s}) = softplus(-s); negative s + log(1+e^{-s}) = softplus(s)
    return float(softplus(-s[pos]).sum() + softplus(s[~pos]).sum())


def slate_term_weights(origin: np.ndarray, L: int, k_h: int, k_r: int) -> np.ndarray:
    """Per-slot estimator coefficient c: 1 everywhere except (L-k_h)/k_r on R slots."""
    c = np.ones(len(origin), dtype=np.float64)
    c[origin == ORIGIN_RAND] = (L - k_h) / k_r
    return c


def _validate_slate(scores, y_mask, origin, L, k_h, k_r):
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y_mask, dtype=np.float64)
    origin = np.asarray(origin)
    if scores.shape != y.shape or scores.shape != origin.shape:
        raise ConfigError("slate arrays must share one shape")
    if not np.isfinite(scores).all():
        raise NumericalError("non-finite slate score")
    if k_h >= L:
        raise ConfigError("k_h must be smaller than L")
    if k_r <= 0:
        raise ConfigError("k_r must be positive")
    n_rand = int((origin == ORIGIN_RAND).sum())
    if n_rand != k_r:
        raise ConfigError(f"slate holds {n_rand} random slots but k_r={k_r}")
    return scores, y, origin


def slate_loss(scores, y_mask, origin, L: int, k_h: int, k_r: int) -> LossBreakdown:
    """Sampled-slate estimator of the full objective (unbiased over R draws)."""
    scores, y, origin = _validate_slate(scores, y_mask, origin, L, k_h, k_r)
    pos_slots = (origin == ORIGIN_POS) & (y == 1)
    hard_slots = (origin == ORIGIN_HARD) | (origin == ORIGIN_PAD)
    rand_slots = origin == ORIGIN_RAND
    positive = float(softplus(-scores[pos_slots]).sum())
    hard = float(((1.0 - y[hard_slots]) * softplus(scores[hard_slots])).sum())
    weight = (L - k_h) / k_r
    rand = float(weight * ((1.0 - y[rand_slots]) * softplus(scores[rand_slots])).sum())
    return LossBreakdown(positive, hard, rand)


def slate_gradient_factors(scores, y_mask, origin, L: int, k_h: int, k_r: int) -> np.ndarray:
    """Per-slot d(loss)/d(score): c * (sigmoid(s) - y), with y forced to 1
    only where the slot's term actually treats the label as positive."""
    scores, y, origin = _validate_slate(scores, y_mask, origin, L, k_h, k_r)
    c = slate_term_weights(origin, L, k_h, k_r)
    factors = c * (sigmoid(scores) - y)
    # a mask-0 slot in the positive section contributes softplus(s): factor sigmoid(s)
    # a mask-1 slot in H/R contributes nothing at all
    dead = ((origin == ORIGIN_HARD) | (origin == ORIGIN_RAND) | (origin == ORIGIN_PAD)) & (y == 1)
    factors[dead] = 0.0
    return factors


def slate_loss_gradients(
    embedding: np.ndarray,
    slate_rows: np.ndarray,
    slate_ids,
    y_mask,
    origin,
    L: int,
    k_h: int,
    k_r: int,
) -> SlateGradients:
    """Exact gradients of slate_loss w.r.t. each touched classifier row and
    the query embedding. Duplicate slate ids accumulate per occurrence."""
    emb = np.asarray(embedding, dtype=np.float64)
    rows = np.asarray(slate_rows, dtype=np.float64)
    scores = rows @ emb
    factors = slate_gradient_factors(scores, y_mask, origin, L, k_h, k_r)
    per_label: dict[int, np.ndarray] = {}
    for i, lab in enumerate(np.asarray(slate_ids, dtype=np.int64)):
        g = factors[i] * emb
        key = int(lab)
        if key in per_label:
            per_label[key] = per_label[key] + g
        else:
            per_label[key] = g
    wrt_embedding = factors @ rows
    return SlateGradients(per_label, wrt_embedding)


def gradient_variance_probe(
    weights: np.ndarray,
    embedding: np.ndarray,
    positives,
    hard_ids,
    k_r_values,
    trials: int,
    seed: int = 0,
) -> dict[int, float]:
    """Empirical std of ||estimated - true|| embedding gradient per k_r.

    The estimator and the full gradient differ only in the random-negative
    part, so the error is the reweighted sum over R draws minus the exact
    sum over the non-hard labels.
    """
    if trials < 1000:
        raise ConfigError("variance probe needs at least 1000 trials")
    W = np.asarray(weights, dtype=np.float64)
    emb = np.asarray(embedding, dtype=np.float64)
    L = W.shape[0]
    hard = np.asarray(sorted(hard_ids), dtype=np.int64)
    y = np.zeros(L)
    y[np.asarray(list(positives), dtype=np.int64)] = 1.0

    scores = W @ emb
    # per-label negative-term gradient contribution (1-y) * sigmoid(s) * w
    contrib = ((1.0 - y) * sigmoid(scores))[:, None] * W
    candidates = np.setdiff1d(np.arange(L), hard)
    exact = contrib[candidates].sum(axis=0)

    rng = np.random.default_rng(seed)
    out: dict[int, float] = {}
    for k_r in k_r_values:
        errs = np.empty(trials)
        done = 0
        while done < trials:  # chunked so the (chunk, k_r, d) gather stays small
            chunk = min(256, trials - done)
            draws = candidates[rng.integers(0, len(candidates), size=(chunk, int(k_r)))]
            est = contrib[draws].sum(axis=1) * ((L - len(hard)) / k_r)
            errs[done : done + chunk] = np.linalg.norm(est - exact, axis=1)
            done += chunk
        out[int(k_r)] = float(errs.std())
    return out
