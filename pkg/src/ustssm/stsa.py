"""Spatio-temporal structure aggregation: 4-D k-NN plus exponential pooling.

Neighbours of a center minimise ``|X_c - X_j|_2 + |E_c - E_j|_2`` over all
points of the sequence, where ``E`` is a learned per-frame embedding.  Each
neighbour feature is turned into ``(F_j - F_c) / (|F_j - F_c| + eps) | F_c``,
pooled with per-channel softmax weights over the neighbours and mapped back
to ``C`` channels by an MLP.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import tensor as T
from .nn import MlpSpec, derive_seed, init_mlp, mlp_forward, xavier_init
from .tensor import Tensor

BRUTE_FORCE_MAX = 256
_MARGIN = 1e-12


def _metric(coords, emb, rows, cols):
    dx = coords[rows] - coords[cols]
    de = emb[rows] - emb[cols]
    return np.sqrt((dx * dx).sum(-1)) + np.sqrt((de * de).sum(-1))


def _knn4d_brute(coords, emb, k, block=256):
    L = len(coords)
    nbr = np.empty((L, k), dtype=np.intp)
    dist = np.empty((L, k))
    cols = np.arange(L)
    for s in range(0, L, block):
        rows = np.arange(s, min(s + block, L))
        m = _metric(coords, emb, rows[:, None], cols[None, :])
        order = np.argsort(m, axis=1, kind="stable")[:, :k]
        nbr[rows] = order
        dist[rows] = np.take_along_axis(m, order, axis=1)
    return nbr, dist


def _select(cands: np.ndarray, m: np.ndarray, k: int):
    order = np.lexsort((cands, m))[:k]
    return cands[order], m[order]


def _knn4d_tree(coords, emb, k):
    # sqrt(a^2 + b^2) <= a + b, so the joint Euclidean distance lower-bounds the
    # metric: the Euclidean 2k-NN contain the answer whenever the k-th metric
    # value is below the 2k-th Euclidean distance; otherwise fall back to a
    # ball query of radius k-th metric value, which is a guaranteed superset.
    L = len(coords)
    joint = np.concatenate([coords, emb], axis=1)
    tree = cKDTree(joint)
    m_cand = min(L, 2 * k)
    eucl, cand = tree.query(joint, k=m_cand)
    cand = cand.reshape(L, m_cand)
    eucl = eucl.reshape(L, m_cand)
    rows = np.arange(L)[:, None]
    m = _metric(coords, emb, rows, cand)
    order = np.lexsort((cand, m), axis=1)[:, :k]
    nbr = np.take_along_axis(cand, order, axis=1)
    dist = np.take_along_axis(m, order, axis=1)
    if m_cand < L:
        unsure = np.flatnonzero(dist[:, -1] >= eucl[:, -1] * (1 - _MARGIN))
        for i in unsure:
            r = dist[i, -1] * (1 + _MARGIN) + _MARGIN
            ball = np.asarray(tree.query_ball_point(joint[i], r), dtype=np.intp)
            nbr[i], dist[i] = _select(ball, _metric(coords, emb, i, ball), k)
    return nbr, dist


def knn4d(coords: np.ndarray, emb: np.ndarray, k: int, method: str = "auto") -> tuple:
    """Exact k nearest points under the spatial + embedding metric.

    Returns ``(neighbors, distances)``, each ``L x k``, sorted by distance with
    ties broken by index.  ``method`` is 'brute', 'tree' or 'auto'.
    """
    coords = np.asarray(coords, dtype=np.float64)
    emb = np.asarray(emb, dtype=np.float64)
    L = len(coords)
    if not 1 <= k <= L:
        raise ValueError(f"k must be in [1, {L}], got {k}")
    if method == "auto":
        method = "brute" if L <= BRUTE_FORCE_MAX else "tree"
    if method == "brute":
        return _knn4d_brute(coords, emb, k)
    if method == "tree":
        return _knn4d_tree(coords, emb, k)
    raise ValueError(f"unknown method {method!r}")


def relative_normalize(F_K: Tensor, F_C: Tensor, eps: float = 1e-6) -> Tensor:
    """``(F_K - F_C) / (|F_K - F_C|_2 + eps)`` concatenated with ``F_C``.

    ``F_K`` is ``[..., k, C]`` and ``F_C`` is ``[..., C]``; the result is ``[..., k, 2C]``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    F_K, F_C = T.as_tensor(F_K), T.as_tensor(F_C)
    center = T.reshape(F_C, F_C.shape[:-1] + (1, F_C.shape[-1]))
    diff = T.sub(F_K, center)
    rel = T.div(diff, T.add(T.l2norm(diff, axis=-1), eps))
    return T.concat([rel, T.broadcast_to(center, F_K.shape)], axis=-1)


def pooling_weights(Fp: Tensor) -> Tensor:
    """Per-channel softmax over the neighbour axis."""
    return T.softmax(Fp, axis=-2)


def exp_pool(Fp: Tensor, spec: MlpSpec, params) -> Tensor:
    """Softmax-weighted sum over neighbours (``[..., k, 2C] -> [..., 2C]``), then MLP to ``C``."""
    w = pooling_weights(Fp)
    pooled = T.sum_(T.mul(w, Fp), axis=-2)
    return mlp_forward(pooled, spec, params)


@dataclass
class StsaParams:
    spec: MlpSpec
    mlp: list
    embedding: Tensor  # T' x d_t

    @classmethod
    def init(cls, channels: int, n_frames: int, d_t: int = 4, seed: int = 0, noise: float = 0.01):
        spec = MlpSpec((2 * channels, channels, channels), ("relu", "none"), derive_seed(seed, 1))
        return cls(spec, init_mlp(spec), init_temporal_embedding(n_frames, d_t, derive_seed(seed, 2), noise))

    def parameters(self) -> list:
        return self.mlp + [self.embedding]


def init_temporal_embedding(n_frames: int, d_t: int = 4, seed: int = 0, noise: float = 0.01) -> Tensor:
    """Rows start at the normalized frame index plus a small Xavier-uniform jitter."""
    base = np.repeat((np.arange(n_frames) / max(n_frames, 1))[:, None], d_t, axis=1)
    jitter = noise * xavier_init(n_frames, d_t, seed).data
    return Tensor(base + jitter, requires_grad=True)


def neighbors_for(coords: np.ndarray, frame_of: np.ndarray, embedding: np.ndarray, k: int) -> np.ndarray:
    """Batched 4-D k-NN; ``coords`` is ``B x L x 3``; returns global row indices ``B x L x k``."""
    B, L = frame_of.shape
    k = min(k, L)
    out = np.empty((B, L, k), dtype=np.intp)
    for b in range(B):
        nbr, _ = knn4d(coords[b], embedding[frame_of[b]], k)
        out[b] = nbr + b * L
    return out


def stsa_aggregate(feats: Tensor, neighbors: np.ndarray, params: StsaParams, eps: float = 1e-6,
                   return_weights: bool = False):
    """Aggregated update for every point; ``feats`` is ``B x L x C``, ``neighbors`` global rows."""
    B, L, C = feats.shape
    flat = T.reshape(feats, (B * L, C))
    k = neighbors.shape[-1]
    F_K = T.reshape(T.take(flat, neighbors.reshape(-1)), (B * L, k, C))
    Fp = relative_normalize(F_K, flat, eps)
    out = T.reshape(exp_pool(Fp, params.spec, params.mlp), (B, L, C))
    if return_weights:
        return out, pooling_weights(Fp).data
    return out


def stsa_block(feats: Tensor, coords: np.ndarray, frame_of: np.ndarray, params: StsaParams,
               k: int = 8, eps: float = 1e-6) -> Tensor:
    """Residual aggregation: ``feats + update``."""
    feats = T.as_tensor(feats)
    squeeze = feats.ndim == 2
    if squeeze:
        feats = T.reshape(feats, (1,) + feats.shape)
        coords, frame_of = coords[None], np.asarray(frame_of)[None]
    nbr = neighbors_for(coords, frame_of, params.embedding.data, k)
    out = T.add(feats, stsa_aggregate(feats, nbr, params, eps))
    return T.reshape(out, out.shape[1:]) if squeeze else out


def received_weight(neighbors: np.ndarray, weights: np.ndarray, n_rows: int) -> np.ndarray:
    """Pooling mass each point receives as a neighbour, averaged over channels."""
    mass = weights.mean(axis=-1).reshape(-1)
    return np.bincount(neighbors.reshape(-1), weights=mass, minlength=n_rows)
