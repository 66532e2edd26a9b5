"""Sparse-input embedding network: linear projection plus optional tanh layer.

Small enough that every gradient is hand-derived and checkable against
finite differences, large enough that joint training with the per-label
classifiers is nontrivial. Parameters are float32; verification paths
upcast to float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, NumericalError


@dataclass
class EncoderParams:
    projection: np.ndarray  # D x h
    hidden: np.ndarray | None = None  # h x d
    hidden_bias: np.ndarray | None = None  # d

    @property
    def n_features(self) -> int:
        return self.projection.shape[0]

    @property
    def bottleneck_dim(self) -> int:
        if self.hidden is not None:
            return self.hidden.shape[1]
        return self.projection.shape[1]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.projection.copy(),
            None if self.hidden is None else self.hidden.copy(),
            None if self.hidden_bias is None else self.hidden_bias.copy(),
        )


@dataclass
class EncoderGrads:
    projection: np.ndarray
    hidden: np.ndarray | None = None
    hidden_bias: np.ndarray | None = None


def init_encoder(D: int, h: int, d: int, scheme: str, seed: int, hidden: bool | None = None) -> EncoderParams:
    """Deterministic init; scheme 'uniform-scaled' (+-1/sqrt(fan_in)) or 'zeros'.

    A hidden tanh layer is created when ``hidden`` is true; by default it
    is present exactly when h != d.
    """
    if min(D, h, d) <= 0:
        raise ConfigError("encoder dimensions must be positive")
    if hidden is None:
        hidden = h != d
    if not hidden and h != d:
        raise ConfigError("without a hidden layer, h must equal d")
    rng = np.random.default_rng(seed)

    def make(shape, fan_in):
        if scheme == "zeros":
            return np.zeros(shape, dtype=np.float32)
        if scheme == "uniform-scaled":
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape).astype(np.float32)
        raise ConfigError(f"unknown init scheme {scheme!r}")

    proj = make((D, h), D)
    if not hidden:
        return EncoderParams(proj)
    return EncoderParams(proj, make((h, d), h), np.zeros(d, dtype=np.float32))


def _as_dense_row(x, D: int) -> np.ndarray:
    if isinstance(x, tuple):
        ids, vals = x
        row = np.zeros(D, dtype=np.float64)
        row[np.asarray(ids, dtype=np.int64)] = vals
        return row
    return np.asarray(x, dtype=np.float64)


def embed(params: EncoderParams, x) -> np.ndarray:
    """Embed one sparse row; ``x`` is (ids, values) or a dense vector."""
    if isinstance(x, tuple):
        ids = np.asarray(x[0], dtype=np.int64)
        vals = np.asarray(x[1], dtype=np.float64)
        if len(ids) and ids.max() >= params.n_features:
            raise ConfigError("feature id out of range for encoder")
        pre = vals @ params.projection[ids] if len(ids) else np.zeros(params.projection.shape[1])
    else:
        x = np.asarray(x)
        if x.shape[0] != params.n_features:
            raise ConfigError("input dimension mismatch")
        pre = x @ params.projection
    if params.hidden is None:
        return pre.astype(np.float32)
    return (np.tanh(pre) @ params.hidden + params.hidden_bias).astype(np.float32)


def embed_batch(params: EncoderParams, rows: sp.csr_matrix) -> np.ndarray:
    """Embed a CSR batch; returns a B x d float32 matrix."""
    if rows.shape[1] != params.n_features:
        raise ConfigError("batch feature dimension mismatch")
    pre = rows @ params.projection
    if params.hidden is None:
        return np.asarray(pre, dtype=np.float32)
    out = np.tanh(pre) @ params.hidden + params.hidden_bias
    return np.asarray(out, dtype=np.float32)


def encoder_backward(params: EncoderParams, x, grad_wrt_embedding) -> EncoderGrads:
    """Exact gradient of <g, embed(params, x)> w.r.t. every parameter.

    The projection gradient is dense D x h but nonzero only on the rows
    indexed by x's support.
    """
    g = np.asarray(grad_wrt_embedding, dtype=np.float64)
    if g.shape[0] != params.bottleneck_dim:
        raise ConfigError("upstream gradient dimension mismatch")
    xd = _as_dense_row(x, params.n_features)
    proj = params.projection.astype(np.float64)
    if params.hidden is None:
        return EncoderGrads(projection=np.outer(xd, g))
    pre = xd @ proj
    t = np.tanh(pre)
    hid = params.hidden.astype(np.float64)
    grad_hidden = np.outer(t, g)
    grad_bias = g.copy()
    g_pre = (hid @ g) * (1.0 - t * t)
    return EncoderGrads(
        projection=np.outer(xd, g_pre), hidden=grad_hidden, hidden_bias=grad_bias
    )


def encoder_backward_batch(
    params: EncoderParams, rows: sp.csr_matrix, grad_wrt_embeddings: np.ndarray
) -> EncoderGrads:
    """Summed parameter gradients over a batch of (row, upstream-grad) pairs."""
    G = np.asarray(grad_wrt_embeddings)
    if not np.isfinite(G).all():
        raise NumericalError("non-finite upstream gradients")
    if params.hidden is None:
        return EncoderGrads(projection=np.asarray((rows.T @ G)))
    pre = np.asarray(rows @ params.projection)
    t = np.tanh(pre)
    grad_hidden = t.T @ G
    grad_bias = G.sum(axis=0)
    g_pre = (G @ params.hidden.T) * (1.0 - t * t)
    return EncoderGrads(
        projection=np.asarray(rows.T @ g_pre),
        hidden=grad_hidden,
        hidden_bias=grad_bias,
    )
