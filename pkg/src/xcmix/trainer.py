"""End-to-end training loop with staged asynchronous index refresh.

One trainer thread owns all parameter state. Hard-negative caches are
produced by a background worker: at the end of epoch c-2 the trainer
snapshots the classifier rows and encoder, the worker builds an index and
retrieves hard negatives for every row during epoch c-1, and the fresh
cache is consumed from epoch c on. The encoder takes adaptive-moment
updates; classifier rows take plain SGD restricted to the labels touched
by the batch's slates.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from . import anns
from .classifiers import ClassifierBank, apply_classifier_updates_arrays, init_classifiers
from .dataset import SparseDataset
from .encoder import (
    EncoderGrads,
    EncoderParams,
    embed_batch,
    encoder_backward_batch,
    init_encoder,
)
from .errors import ConfigError, NumericalError
from .loss import ORIGIN_HARD, ORIGIN_PAD, ORIGIN_POS, ORIGIN_RAND, sigmoid, softplus
from .sampler import SamplerStrategy, SlateCaches, curriculum_counts

_CKPT_MAGIC = b"XAST"
_CKPT_VERSION = 1

_FULL_LOSS_LABEL_CAP = 50_000


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr_encoder: float = 0.01
    lr_classifier: float = 0.05
    warmup_steps: int = 50
    dropout: float = 0.0
    weight_decay_classifier: float = 1e-4
    k_r: int = 30
    k_h: int = 10
    k_p: int = 3
    tau_s: int = 5
    tau_r: int = 5
    strategy: str = "Mixture"
    curriculum_ramp: int = 20
    seed: int = 0
    eval_every: int = 5
    embed_dim: int = 64
    hidden_dim: int = 64
    use_hidden_layer: bool = False
    init_scheme: str = "uniform-scaled"
    anns_kind: str = "exact"
    anns_max_degree: int = 32
    anns_build_beam: int = 64
    anns_query_beam: int = 128

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.anns_kind not in ("exact", "approx"):
            raise ConfigError("anns_kind must be 'exact' or 'approx'")

    def sampler_strategy(self) -> SamplerStrategy:
        return SamplerStrategy(
            kind=self.strategy, k_p=self.k_p, k_h=self.k_h, k_r=self.k_r,
            curriculum_ramp=self.curriculum_ramp,
        )

    def digest(self) -> bytes:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


@dataclass
class EpochRecord:
    epoch: int
    wall_seconds: float
    mean_slate_loss: float
    probe_full_loss: float
    p_at_1: float | None
    p_at_5: float | None
    snapshot_epoch: int  # -1 while no hard-negative cache is in use


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    events: list = field(default_factory=list)

    CSV_HEADER = "epoch,wall_seconds,mean_slate_loss,probe_full_loss,p_at_1,p_at_5,snapshot_epoch"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_HEADER.split(","))
            for r in self.records:
                writer.writerow(
                    [
                        r.epoch,
                        f"{r.wall_seconds:.6f}",
                        f"{r.mean_slate_loss:.6f}",
                        f"{r.probe_full_loss:.6f}",
                        "" if r.p_at_1 is None else f"{r.p_at_1:.6f}",
                        "" if r.p_at_5 is None else f"{r.p_at_5:.6f}",
                        r.snapshot_epoch,
                    ]
                )

    def to_json(self, path=None):
        doc = {"records": [asdict(r) for r in self.records], "events": self.events}
        if path is None:
            return doc
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)


@dataclass
class OptimizerState:
    """Adaptive-moment state for the encoder; classifiers are stateless SGD."""

    m: EncoderGrads
    v: EncoderGrads
    step: int = 0


def init_optimizer(params: EncoderParams) -> OptimizerState:
    def zeros_like(p):
        return EncoderGrads(
            projection=np.zeros_like(p.projection, dtype=np.float32),
            hidden=None if p.hidden is None else np.zeros_like(p.hidden, dtype=np.float32),
            hidden_bias=None if p.hidden_bias is None else np.zeros_like(p.hidden_bias, dtype=np.float32),
        )

    return OptimizerState(m=zeros_like(params), v=zeros_like(params))


def lr_at(step: int, total_steps: int, warmup_steps: int, peak_lr: float) -> float:
    """Linear warmup to the peak, then cosine decay to zero."""
    if warmup_steps >= total_steps:
        raise ConfigError("warmup_steps must be smaller than total_steps")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def adam_step(
    state: OptimizerState,
    params: EncoderParams,
    grads: EncoderGrads,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected adaptive-moment update, in place."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t

    def upd(p, m, v, g):
        if g is None:
            return
        g = np.asarray(g, dtype=np.float32)
        if not np.isfinite(g).all():
            raise NumericalError("non-finite encoder gradient")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= np.float32(lr / bc1) * m / (np.sqrt(v / bc2) + eps)

    upd(params.projection, state.m.projection, state.v.projection, grads.projection)
    if params.hidden is not None:
        upd(params.hidden, state.m.hidden, state.v.hidden, grads.hidden)
        upd(params.hidden_bias, state.m.hidden_bias, state.v.hidden_bias, grads.hidden_bias)


class _RefreshJob(threading.Thread):
    """Runs one build+retrieve cycle off the trainer thread."""

    def __init__(self, fn):
        super().__init__(daemon=True)
        self.fn = fn
        self.result = None
        self.seconds = 0.0
        self.error = None

    def run(self):
        t0 = time.perf_counter()
        try:
            self.result = self.fn()
        except Exception as exc:  # surfaced when the trainer joins
            self.error = exc
        self.seconds = time.perf_counter() - t0


class TrainerState:
    """Everything the epoch loop mutates, bundled for reuse by the timing probe."""

    def __init__(self, dataset: SparseDataset, config: TrainConfig, eval_dataset: SparseDataset | None = None):
        if config.k_h + config.k_r + config.k_p >= dataset.n_labels:
            raise ConfigError("slate budget must stay below the label count")
        self.dataset = dataset
        self.config = config
        self.eval_dataset = eval_dataset
        self.strategy = config.sampler_strategy()
        if self.strategy.needs_label_features and dataset.label_features is None:
            raise ConfigError(f"strategy {config.strategy} needs label features")

        d = config.embed_dim
        h = config.hidden_dim if config.use_hidden_layer else d
        self.encoder = init_encoder(
            dataset.n_features, h, d, config.init_scheme, config.seed, hidden=config.use_hidden_layer
        )
        self.bank = init_classifiers(dataset.n_labels, d, config.init_scheme, config.seed + 1)
        self.opt = init_optimizer(self.encoder)
        self.caches = SlateCaches()
        self.schedule = anns.RefreshSchedule(config.tau_s, config.tau_r)
        self.log = TrainLog()
        self.global_step = 0
        self.total_steps = 0

        self.active_rows = np.array(
            [i for i in range(dataset.n_points) if len(dataset.positives[i]) > 0], dtype=np.int64
        )
        pmax = max((len(p) for p in dataset.positives), default=1)
        self.pos_padded = np.full((dataset.n_points, max(pmax, 1)), -1, dtype=np.int64)
        for i, p in enumerate(dataset.positives):
            self.pos_padded[i, : len(p)] = p
        self.n_pos = np.array([len(p) for p in dataset.positives], dtype=np.int64)

        probe_n = min(200, len(self.active_rows))
        self.probe_rows = self.active_rows[:probe_n]
        self.probe_feats = dataset.features[self.probe_rows]
        self.probe_y = np.zeros((probe_n, dataset.n_labels), dtype=bool)
        for j, i in enumerate(self.probe_rows):
            self.probe_y[j, dataset.positives[i]] = True

        self._pending_jobs: dict[int, _RefreshJob] = {}


def _assemble_batch_slates(state: TrainerState, batch_rows, epoch, rng, hard_batch):
    """Vectorized slates for one batch; returns (ids B x S, y B x S, origin S, weights S)."""
    cfg = state.config
    L = state.dataset.n_labels
    B = len(batch_rows)
    k_h_eff = 0 if hard_batch is None else hard_batch.shape[1]
    _, k_r_eff = curriculum_counts(epoch, state.strategy, cfg.tau_s)
    if hard_batch is None:
        k_r_eff = state.strategy.k_h + state.strategy.k_r
    k_p = cfg.k_p

    ppad = state.pos_padded[batch_rows]
    npos = state.n_pos[batch_rows]
    keys = rng.random(ppad.shape)
    keys[ppad < 0] = np.inf
    if ppad.shape[1] < k_p:
        ppad = np.concatenate([ppad, np.full((B, k_p - ppad.shape[1]), -1, dtype=np.int64)], axis=1)
        keys = np.concatenate([keys, np.full((B, k_p - keys.shape[1]), np.inf)], axis=1)
    order = np.argsort(keys, axis=1)[:, :k_p]
    pos_ids = np.take_along_axis(ppad, order, axis=1)
    pos_mask = pos_ids >= 0
    pad_b, pad_s = np.nonzero(~pos_mask)
    if len(pad_b):
        cand = rng.integers(0, L, size=len(pad_b))
        bad = (cand[:, None] == ppad[pad_b]).any(axis=1)
        while bad.any():  # rejection-resample collisions with the row's positives
            cand[bad] = rng.integers(0, L, size=int(bad.sum()))
            bad = (cand[:, None] == ppad[pad_b]).any(axis=1)
        pos_ids[pad_b, pad_s] = cand

    parts = [pos_ids]
    origin = [np.where(pos_mask, ORIGIN_POS, ORIGIN_PAD).astype(np.int8)]
    y = [pos_mask.astype(np.int8)]
    if k_h_eff > 0:
        parts.append(hard_batch.astype(np.int64))
        origin.append(np.full((B, k_h_eff), ORIGIN_HARD, dtype=np.int8))
        y.append(np.zeros((B, k_h_eff), dtype=np.int8))
    if k_r_eff > 0:
        v = rng.integers(0, L - k_h_eff, size=(B, k_r_eff))
        if k_h_eff > 0:
            hs = np.sort(hard_batch, axis=1)
            shifted = hs - np.arange(k_h_eff)
            rand_ids = v + (shifted[:, None, :] <= v[:, :, None]).sum(axis=2)
        else:
            rand_ids = v
        parts.append(rand_ids.astype(np.int64))
        origin.append(np.full((B, k_r_eff), ORIGIN_RAND, dtype=np.int8))
        y_rand = (rand_ids[:, :, None] == ppad[:, None, :]).any(axis=2)
        y.append(y_rand.astype(np.int8))

    ids = np.concatenate(parts, axis=1)
    origin = np.concatenate(origin, axis=1)[0]  # identical across rows
    y = np.concatenate(y, axis=1)
    weights = np.ones(ids.shape[1], dtype=np.float32)
    if k_r_eff > 0:
        weights[origin == ORIGIN_RAND] = (L - k_h_eff) / k_r_eff
    return ids, y, origin, weights


def _uptodate_hard_batch(state: TrainerState, batch_rows, embeddings, epoch):
    """Oracle arm: fresh exact index this iteration, per-row retrieval."""
    cfg = state.config
    k_h_eff, _ = curriculum_counts(epoch, state.strategy, cfg.tau_s)
    state.caches.live_index = anns.build_exact(state.bank.weights, snapshot_epoch=epoch)
    out = np.empty((len(batch_rows), k_h_eff), dtype=np.int64)
    for j, i in enumerate(batch_rows):
        pos = state.dataset.positives[i]
        state.caches.index_queries += 1
        sl = anns.query_topk(state.caches.live_index, embeddings[j], k_h_eff + len(pos))
        mask = ~np.isin(sl.label_ids, pos)
        out[j] = sl.label_ids[mask][:k_h_eff]
    return out


def _batch_forward_backward(state: TrainerState, batch_rows, epoch, rng, step_lr_enc, step_lr_clf, feats=None):
    """One mini-batch update; returns summed slate loss over the batch."""
    cfg = state.config
    if feats is None:
        feats = state.dataset.features[batch_rows]
    emb = embed_batch(state.encoder, feats)

    if cfg.dropout > 0:
        keep = (rng.random(emb.shape) >= cfg.dropout).astype(np.float32) / np.float32(1.0 - cfg.dropout)
        emb_used = emb * keep
    else:
        keep = None
        emb_used = emb

    use_hard = state.strategy.uses_hard_negatives and epoch >= cfg.tau_s
    hard_batch = None
    if use_hard:
        if state.strategy.kind == "UpToDateHard":
            hard_batch = _uptodate_hard_batch(state, batch_rows, emb_used, epoch)
        else:
            if state.caches.negative_cache is None:
                raise ConfigError("hard-negative epoch reached without a cache")
            k_h_eff, _ = curriculum_counts(epoch, state.strategy, cfg.tau_s)
            state.caches.cache_reads += len(batch_rows)
            hard_batch = state.caches.negative_cache.ids[batch_rows][:, :k_h_eff].astype(np.int64)
            if hard_batch.shape[1] == 0:
                hard_batch = None

    ids, y, origin, weights = _assemble_batch_slates(state, batch_rows, epoch, rng, hard_batch)

    rows_w = state.bank.weights[ids]  # B x S x d
    scores = np.einsum("bsd,bd->bs", rows_w, emb_used)

    pos_slot = origin == ORIGIN_POS
    yf = y.astype(np.float32)
    sig = expit(scores)
    # positive-section mask-1 slots take the positive term; everything else
    # is a (possibly reweighted) negative term that mask-1 slots zero out
    pos_term = yf * pos_slot[None, :]
    neg_alive = (1.0 - yf) * (~pos_slot)[None, :]
    sp_neg = softplus(-scores)  # softplus(s) = softplus(-s) + s
    loss_terms = pos_term * sp_neg + weights[None, :] * neg_alive * (sp_neg + scores)
    batch_loss = float(loss_terms.sum())

    factors = pos_term * (sig - np.float32(1.0)) + weights[None, :] * neg_alive * sig

    grad_emb = np.einsum("bs,bsd->bd", factors, rows_w)
    if keep is not None:
        grad_emb = grad_emb * keep
    enc_grads = encoder_backward_batch(state.encoder, feats, grad_emb)
    adam_step(state.opt, state.encoder, enc_grads, step_lr_enc)

    # per-label gradient sum as a sparse matmul: rows of A hold each slate's
    # factors at its label columns, so A^T @ emb accumulates duplicates for free
    B, S = ids.shape
    A = sp.csr_matrix((factors.ravel(), ids.ravel(), np.arange(0, B * S + 1, S)), shape=(B, state.bank.n_labels))
    full = A.T @ emb_used
    uids = np.unique(ids.ravel())
    apply_classifier_updates_arrays(state.bank, uids, full[uids], step_lr_clf, cfg.weight_decay_classifier)
    return batch_loss


def _probe_full_loss(state: TrainerState) -> float:
    emb = embed_batch(state.encoder, state.probe_feats).astype(np.float64)
    scores = emb @ state.bank.weights.astype(np.float64).T
    pos = state.probe_y
    total = softplus(-scores[pos]).sum() + softplus(scores[~pos]).sum()
    return float(total / len(state.probe_rows))


def _eval_p_at(state: TrainerState) -> tuple[float | None, float | None]:
    ds = state.eval_dataset
    if ds is None:
        return None, None
    emb = embed_batch(state.encoder, ds.features)
    scores = emb @ state.bank.weights.T
    top5 = np.argsort(-scores, axis=1, kind="stable")[:, :5]
    hits1 = hits5 = n = 0
    for i in range(ds.n_points):
        pos = set(ds.positives[i].tolist())
        if not pos:
            continue
        n += 1
        hits1 += int(top5[i, 0] in pos)
        hits5 += len(pos.intersection(top5[i].tolist())) / 5.0
    if n == 0:
        return None, None
    return hits1 / n, hits5 / n


def _refresh_fn(state: TrainerState, snapshot_epoch: int):
    """Returns the closure the background worker runs for one refresh."""
    cfg = state.config
    enc = state.encoder.copy()
    weights = state.bank.weights.copy()
    feats = state.dataset.features
    positives = state.dataset.positives
    k_h = state.strategy.k_h + (state.strategy.k_r if state.strategy.kind in ("StaleHard", "LabelEmbHard") else 0)

    label_based = state.strategy.needs_label_features
    label_feats = state.dataset.label_features

    def job():
        embeddings = embed_batch(enc, feats)
        if label_based:
            from .sampler import retrieve_label_embedding_hard

            return retrieve_label_embedding_hard(
                enc, label_feats, embeddings, positives, k_h, snapshot_epoch=snapshot_epoch
            )
        if cfg.anns_kind == "approx":
            index = anns.build_approx(
                weights, cfg.anns_max_degree, cfg.anns_build_beam, seed=cfg.seed,
                snapshot_epoch=snapshot_epoch,
            )
        else:
            index = anns.build_exact(weights, snapshot_epoch=snapshot_epoch)
        return anns.retrieve_hard_negatives(index, embeddings, positives, k_h, cfg.anns_query_beam)

    return job


def _needs_pipeline(strategy: SamplerStrategy) -> bool:
    return strategy.uses_hard_negatives and strategy.kind != "UpToDateHard"


def _save_epochs(config: TrainConfig) -> dict[int, int]:
    """Map save-epoch -> consume-epoch for every consume epoch in the run."""
    out = {}
    c = config.tau_s
    while c < config.epochs:
        out[max(c - 2, 0) if c >= 2 else c - 1] = c
        c += config.tau_r
    return out


def train_epoch(state: TrainerState, epoch: int) -> EpochRecord:
    """One pass over the (shuffled, non-empty) rows; returns the log record."""
    cfg = state.config
    t0 = time.perf_counter()
    rng = np.random.default_rng((cfg.seed, 7919, epoch))
    perm = rng.permutation(len(state.active_rows))
    rows = state.active_rows[perm]
    feats_epoch = state.dataset.features[rows]  # one fancy index; batches slice it
    total_loss = 0.0
    for start in range(0, len(rows), cfg.batch_size):
        batch = rows[start : start + cfg.batch_size]
        feats = feats_epoch[start : start + cfg.batch_size]
        total = max(state.total_steps, state.global_step + 1)
        lr_enc = lr_at(state.global_step, total, cfg.warmup_steps, cfg.lr_encoder)
        lr_clf = lr_at(state.global_step, total, cfg.warmup_steps, cfg.lr_classifier)
        total_loss += _batch_forward_backward(state, batch, epoch, rng, lr_enc, lr_clf, feats=feats)
        state.global_step += 1
    wall = time.perf_counter() - t0

    evaluate_now = (epoch % cfg.eval_every == cfg.eval_every - 1) or epoch == cfg.epochs - 1
    p1, p5 = _eval_p_at(state) if evaluate_now else (None, None)
    snap = -1
    if state.caches.negative_cache is not None and state.strategy.uses_hard_negatives and epoch >= cfg.tau_s:
        snap = state.caches.negative_cache.built_from_epoch
    elif state.strategy.kind == "UpToDateHard" and epoch >= cfg.tau_s:
        snap = epoch
    return EpochRecord(
        epoch=epoch,
        wall_seconds=wall,
        mean_slate_loss=total_loss / max(len(rows), 1),
        probe_full_loss=_probe_full_loss(state),
        p_at_1=p1,
        p_at_5=p5,
        snapshot_epoch=snap,
    )


def train(
    dataset: SparseDataset,
    config: TrainConfig,
    eval_dataset: SparseDataset | None = None,
    checkpoint_path=None,
):
    """Run the full loop; returns (encoder, classifier bank, log)."""
    state = TrainerState(dataset, config, eval_dataset)
    n_batches = -(-len(state.active_rows) // config.batch_size)
    state.total_steps = max(config.epochs * n_batches, 1)
    if config.warmup_steps >= state.total_steps and config.epochs > 0:
        raise ConfigError("warmup_steps must be smaller than the total step count")

    save_for = _save_epochs(config) if _needs_pipeline(state.strategy) else {}

    for epoch in range(config.epochs):
        if _needs_pipeline(state.strategy) and state.schedule.is_consume_epoch(epoch):
            job = state._pending_jobs.pop(epoch, None)
            if job is not None:
                stall0 = time.perf_counter()
                job.join()
                stall = time.perf_counter() - stall0
                if job.error is not None:
                    raise job.error
                state.caches.negative_cache = job.result
                state.log.events.append(
                    {
                        "epoch": epoch,
                        "stage": anns.STAGE_CONSUME,
                        "snapshot_epoch": job.result.built_from_epoch,
                        "build_seconds": job.seconds,
                        "stall_seconds": stall,
                    }
                )

        record = train_epoch(state, epoch)
        state.log.records.append(record)
        if checkpoint_path is not None and epoch % config.eval_every == config.eval_every - 1:
            save_checkpoint(checkpoint_path, state.encoder, state.bank, config)

        if epoch in save_for:
            consume_epoch = save_for[epoch]
            job = _RefreshJob(_refresh_fn(state, snapshot_epoch=epoch))
            job.start()
            state._pending_jobs[consume_epoch] = job
            state.log.events.append(
                {"epoch": epoch, "stage": anns.STAGE_SAVE, "snapshot_epoch": epoch, "for_consume_epoch": consume_epoch}
            )

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, state.encoder, state.bank, config)
    return state.encoder, state.bank, state.log


def train_full_loss_baseline(dataset: SparseDataset, config: TrainConfig, eval_dataset=None, checkpoint_path=None):
    """All-negatives arm: every slate is the whole label set with exact targets."""
    if dataset.n_labels > _FULL_LOSS_LABEL_CAP:
        raise ConfigError(f"full-loss baseline capped at L <= {_FULL_LOSS_LABEL_CAP}")
    state = TrainerState(dataset, config, eval_dataset)
    n_batches = -(-len(state.active_rows) // config.batch_size)
    state.total_steps = max(config.epochs * n_batches, 1)
    L = dataset.n_labels

    y_dense = np.zeros((dataset.n_points, L), dtype=np.float32)
    for i, p in enumerate(dataset.positives):
        y_dense[i, p] = 1.0

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng((config.seed, 7919, epoch))
        perm = rng.permutation(len(state.active_rows))
        rows = state.active_rows[perm]
        total_loss = 0.0
        for start in range(0, len(rows), config.batch_size):
            batch = rows[start : start + config.batch_size]
            lr_enc = lr_at(state.global_step, state.total_steps, config.warmup_steps, config.lr_encoder)
            lr_clf = lr_at(state.global_step, state.total_steps, config.warmup_steps, config.lr_classifier)
            feats = dataset.features[batch]
            emb = embed_batch(state.encoder, feats)
            if config.dropout > 0:
                keep = (rng.random(emb.shape) >= config.dropout).astype(np.float32) / np.float32(1.0 - config.dropout)
                emb_used = emb * keep
            else:
                keep = None
                emb_used = emb
            scores = emb_used @ state.bank.weights.T
            yb = y_dense[batch]
            total_loss += float((yb * softplus(-scores) + (1.0 - yb) * softplus(scores)).sum())
            G = (sigmoid(scores).astype(np.float32) - yb)
            grad_emb = G @ state.bank.weights
            if keep is not None:
                grad_emb = grad_emb * keep
            enc_grads = encoder_backward_batch(state.encoder, feats, grad_emb)
            adam_step(state.opt, state.encoder, enc_grads, lr_enc)
            grad_w = G.T @ emb_used
            state.bank.weights -= np.float32(lr_clf) * (
                grad_w + np.float32(config.weight_decay_classifier) * state.bank.weights
            )
            state.global_step += 1
        wall = time.perf_counter() - t0
        evaluate_now = (epoch % config.eval_every == config.eval_every - 1) or epoch == config.epochs - 1
        p1, p5 = _eval_p_at(state) if evaluate_now else (None, None)
        state.log.records.append(
            EpochRecord(epoch, wall, total_loss / max(len(rows), 1), _probe_full_loss(state), p1, p5, -1)
        )
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, state.encoder, state.bank, config)
    return state.encoder, state.bank, state.log


def measure_iteration_breakdown(state: TrainerState, n_iterations: int = 100, full_loss: bool = False):
    """Median per-phase milliseconds over repeated mini-batches.

    Phases: data_prep, embed_fwd, clf_fwd, loss, backward. The state is not
    mutated (no parameter updates); gradients are computed and discarded.
    """
    cfg = state.config
    rng = np.random.default_rng((cfg.seed, 104729))
    times = {k: [] for k in ("data_prep", "embed_fwd", "clf_fwd", "loss", "backward")}
    L = state.dataset.n_labels
    epoch = cfg.tau_s  # hard-negative regime
    if not full_loss and state.strategy.uses_hard_negatives and state.caches.negative_cache is None:
        index = anns.build_exact(state.bank.weights, snapshot_epoch=0)
        emb_all = embed_batch(state.encoder, state.dataset.features)
        k_h = state.strategy.k_h
        state.caches.negative_cache = anns.retrieve_hard_negatives(
            index, emb_all, state.dataset.positives, k_h
        )
    for it in range(n_iterations):
        batch = rng.choice(state.active_rows, size=min(cfg.batch_size, len(state.active_rows)), replace=False)

        if full_loss:
            t0 = time.perf_counter()
            feats = state.dataset.features[batch]
            yb = np.zeros((len(batch), L), dtype=np.float32)
            for j, i in enumerate(batch):
                yb[j, state.dataset.positives[i]] = 1.0
            t1 = time.perf_counter()
            emb = embed_batch(state.encoder, feats)
            t2 = time.perf_counter()
            scores = emb @ state.bank.weights.T
            t3 = time.perf_counter()
            lval = float((yb * softplus(-scores) + (1.0 - yb) * softplus(scores)).sum())
            t4 = time.perf_counter()
            G = sigmoid(scores).astype(np.float32) - yb
            grad_emb = G @ state.bank.weights
            encoder_backward_batch(state.encoder, feats, grad_emb)
            G.T @ emb
            t5 = time.perf_counter()
        else:
            t0 = time.perf_counter()
            feats = state.dataset.features[batch]
            k_h_eff, _ = curriculum_counts(epoch, state.strategy, cfg.tau_s)
            hard_batch = state.caches.negative_cache.ids[batch][:, :k_h_eff].astype(np.int64) if k_h_eff else None
            ids, y, origin, weights = _assemble_batch_slates(state, batch, epoch, rng, hard_batch)
            t1 = time.perf_counter()
            emb = embed_batch(state.encoder, feats)
            t2 = time.perf_counter()
            rows_w = state.bank.weights[ids]
            scores = np.einsum("bsd,bd->bs", rows_w, emb)
            t3 = time.perf_counter()
            pos_slot = origin == ORIGIN_POS
            yf = y.astype(np.float32)
            pos_term = yf * pos_slot[None, :]
            neg_alive = (1.0 - yf) * (~pos_slot)[None, :]
            lval = float((pos_term * softplus(-scores) + weights[None, :] * neg_alive * softplus(scores)).sum())
            t4 = time.perf_counter()
            factors = (pos_term * (sigmoid(scores).astype(np.float32) - 1.0) + weights[None, :] * neg_alive * sigmoid(scores).astype(np.float32)).astype(np.float32)
            grad_emb = np.einsum("bs,bsd->bd", factors, rows_w.astype(np.float32))
            encoder_backward_batch(state.encoder, feats, grad_emb)
            t5 = time.perf_counter()
        del lval
        times["data_prep"].append((t1 - t0) * 1e3)
        times["embed_fwd"].append((t2 - t1) * 1e3)
        times["clf_fwd"].append((t3 - t2) * 1e3)
        times["loss"].append((t4 - t3) * 1e3)
        times["backward"].append((t5 - t4) * 1e3)
    return {k: float(np.median(v)) for k, v in times.items()}


def save_checkpoint(path, encoder: EncoderParams, bank: ClassifierBank, config: TrainConfig) -> None:
    """Binary model file: magic, version, config digest + JSON, encoder, classifiers."""
    cfg_json = json.dumps(asdict(config), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(config.digest())
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        has_hidden = encoder.hidden is not None
        fh.write(struct.pack("<B", int(has_hidden)))
        D, h = encoder.projection.shape
        d = encoder.bottleneck_dim
        fh.write(struct.pack("<QQQ", D, h, d))
        fh.write(np.ascontiguousarray(encoder.projection, dtype="<f4").tobytes())
        if has_hidden:
            fh.write(np.ascontiguousarray(encoder.hidden, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(encoder.hidden_bias, dtype="<f4").tobytes())
        L, dd = bank.weights.shape
        fh.write(struct.pack("<QQ", L, dd))
        fh.write(np.ascontiguousarray(bank.weights, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (encoder, bank, config)."""
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ConfigError("bad checkpoint magic")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CKPT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        digest = fh.read(32)
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        config = TrainConfig(**json.loads(fh.read(cfg_len).decode()))
        if config.digest() != digest:
            raise ConfigError("checkpoint config digest mismatch")
        (has_hidden,) = struct.unpack("<B", fh.read(1))
        D, h, d = struct.unpack("<QQQ", fh.read(24))
        proj = np.frombuffer(fh.read(4 * D * h), dtype="<f4").reshape(D, h).copy()
        hidden = bias = None
        if has_hidden:
            hidden = np.frombuffer(fh.read(4 * h * d), dtype="<f4").reshape(h, d).copy()
            bias = np.frombuffer(fh.read(4 * d), dtype="<f4").copy()
        encoder = EncoderParams(proj, hidden, bias)
        L, dd = struct.unpack("<QQ", fh.read(16))
        weights = np.frombuffer(fh.read(4 * L * dd), dtype="<f4").reshape(L, dd).copy()
    return encoder, ClassifierBank(weights), config
