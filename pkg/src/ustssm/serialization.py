"""Scanning strategies that flatten a ``T' x N'`` point set into one sequence.

* cross-temporal: one global sort by curve key, frames ignored;
* temporally sequential: sort inside each frame, frames in time order;
* selection scanning (STSS): group by prompt cluster, then frame, then Hilbert key.

Every scan returns a permutation of flat indices ``frame * N' + point``; ties
always fall back to the flat index so the result is a total order.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .hilbert import AXIS_ORDERS, curve_keys
from .nn import MlpSpec, derive_seed, init_mlp, mlp_forward, xavier_init
from .tensor import Tensor

CURVES = AXIS_ORDERS + ("hilbert",)
STRATEGIES = ("cross-temporal", "temporal-seq", "stss")


@dataclass
class SerializedSequence:
    perm: np.ndarray
    coords: np.ndarray  # L x 3, in scan order
    frame_of: np.ndarray  # L, in scan order
    feats: np.ndarray | None = None

    @property
    def length(self) -> int:
        return len(self.perm)


def _flatten(coords: np.ndarray) -> tuple:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 3:
        raise ValueError("expected T' x N' x 3 coordinates")
    t, n, _ = coords.shape
    return coords.reshape(-1, 3), np.repeat(np.arange(t), n)


def _finish(perm, flat, frame_of, feats) -> SerializedSequence:
    fe = None
    if feats is not None:
        fe = np.asarray(feats).reshape(len(perm), -1)[perm]
    return SerializedSequence(perm, flat[perm], frame_of[perm], fe)


def scan_cross_temporal(coords, curve: str = "hilbert", bits: int = 10, feats=None) -> SerializedSequence:
    flat, frame_of = _flatten(coords)
    keys = curve_keys(flat, curve, bits)
    perm = np.lexsort((np.arange(len(flat)), keys))
    return _finish(perm, flat, frame_of, feats)


def scan_temporal_sequential(coords, curve: str = "hilbert", bits: int = 10, feats=None) -> SerializedSequence:
    flat, frame_of = _flatten(coords)
    keys = curve_keys(flat, curve, bits)
    perm = np.lexsort((np.arange(len(flat)), keys, frame_of))
    return _finish(perm, flat, frame_of, feats)


def stss_order(flat_coords: np.ndarray, frame_of: np.ndarray, assignment: np.ndarray, bits: int) -> np.ndarray:
    """Sort key (cluster, frame, Hilbert index, flat index), as a permutation."""
    keys = curve_keys(flat_coords, "hilbert", bits)
    return np.lexsort((np.arange(len(flat_coords)), keys, frame_of, np.asarray(assignment)))


def stss(coords, assignment, bits: int = 10, feats=None) -> SerializedSequence:
    """Selection scanning given per-point cluster ids (or a :class:`PromptMatrix`)."""
    flat, frame_of = _flatten(coords)
    if isinstance(assignment, PromptMatrix):
        assignment = assignment.assignment
    assignment = np.asarray(assignment).reshape(-1)
    if len(assignment) != len(flat):
        raise ValueError("one cluster id per point is required")
    perm = stss_order(flat, frame_of, assignment, bits)
    return _finish(perm, flat, frame_of, feats)


def scan(coords, strategy: str, curve: str = "hilbert", bits: int = 10,
         assignment=None, feats=None) -> SerializedSequence:
    if strategy == "cross-temporal":
        return scan_cross_temporal(coords, curve, bits, feats)
    if strategy == "temporal-seq":
        return scan_temporal_sequential(coords, curve, bits, feats)
    if strategy == "stss":
        if curve.lower() != "hilbert":
            raise ValueError("selection scanning always sorts clusters along the Hilbert curve")
        if assignment is None:
            raise ValueError("selection scanning needs cluster assignments")
        return stss(coords, assignment, bits, feats)
    raise ValueError(f"unknown strategy {strategy!r}")


def is_bijection(perm: np.ndarray, n: int | None = None) -> bool:
    perm = np.asarray(perm)
    n = len(perm) if n is None else n
    return perm.ndim == 1 and len(perm) == n and np.array_equal(np.sort(perm), np.arange(n))


def invert_permutation(perm: np.ndarray) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.intp)
    if not is_bijection(perm):
        raise ValueError("not a permutation")
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


def apply_permutation(data, perm: np.ndarray):
    """Gather rows by ``perm``; tensors keep their gradient path (scatter by the inverse)."""
    if isinstance(data, Tensor):
        return T.permute(data, perm, axis=0)
    if not is_bijection(perm, len(data)):
        raise ValueError("not a permutation of the data rows")
    return np.asarray(data)[np.asarray(perm, dtype=np.intp)]


# ---------------------------------------------------------------- prompt network

@dataclass
class PromptMatrix:
    logits: Tensor  # [..., L, K]
    probs: Tensor
    assignment: np.ndarray  # [..., L], argmax with smallest-index ties

    @property
    def k(self) -> int:
        return self.logits.shape[-1]


@dataclass
class PromptNetParams:
    """Learned 3x3 point transform followed by a two-stage shared PointNet."""

    tnet: Tensor  # residual on the identity
    local: MlpSpec
    head: MlpSpec
    local_params: list
    head_params: list

    @classmethod
    def init(cls, feat_dim: int, k: int, seed: int, hidden: int = 64):
        if k < 1:
            raise ValueError("need at least one prompt category")
        tnet = xavier_init(3, 3, derive_seed(seed, 0), gain=0.1)
        local = MlpSpec((3 + feat_dim, hidden), ("relu",), derive_seed(seed, 1))
        head = MlpSpec((3 + feat_dim + hidden, hidden, k), ("relu", "none"), derive_seed(seed, 2))
        return cls(tnet, local, head, init_mlp(local), init_mlp(head))

    @property
    def k(self) -> int:
        return self.head.d_out

    def parameters(self) -> list:
        return [self.tnet] + self.local_params + self.head_params


def prompt_forward(coords, feats, params: PromptNetParams) -> PromptMatrix:
    """Per-point prompt logits over ``[T-Net coords | feats | global max context]``.

    Works on ``L x d`` or batched ``B x L x d`` inputs.
    """
    coords = T.as_tensor(coords)
    feats = T.as_tensor(feats)
    transform = T.add(params.tnet, np.eye(3))
    tc = T.matmul(coords, transform)
    point_in = T.concat([tc, feats], axis=-1)
    local = mlp_forward(point_in, params.local, params.local_params)
    ctx = T.max_(local, axis=-2)
    ctx_shape = ctx.shape[:-1] + (1,) + ctx.shape[-1:]
    ctx = T.broadcast_to(T.reshape(ctx, ctx_shape), local.shape)
    logits = mlp_forward(T.concat([point_in, ctx], axis=-1), params.head, params.head_params)
    probs = T.softmax(logits, axis=-1)
    return PromptMatrix(logits, probs, np.argmax(logits.data, axis=-1))


# ---------------------------------------------------------------- locality benchmark

def mean_adjacent_distance(ordered_coords: np.ndarray) -> float:
    d = np.diff(np.asarray(ordered_coords), axis=0)
    return float(np.sqrt((d * d).sum(axis=1)).mean()) if len(d) else 0.0


def scan_bench_rows(coords, assignment, bits: int = 10, strategies=STRATEGIES, curves=CURVES) -> list:
    """One row per (strategy, curve) combination, mirroring the scanning ablation table.

    ``coords`` is ``T' x N' x 3``; ``assignment`` holds cluster ids for selection scanning.
    """
    rows = []
    n = coords.shape[0] * coords.shape[1]
    for strategy in strategies:
        for curve in curves:
            if strategy == "stss" and curve != "hilbert":
                continue
            t0 = time.perf_counter()
            seq = scan(coords, strategy, curve, bits, assignment)
            dt = time.perf_counter() - t0
            rows.append({
                "strategy": strategy,
                "curve": "Hilbert" if curve == "hilbert" else curve,
                "mean_adjacent_distance": mean_adjacent_distance(seq.coords),
                "bijective": is_bijection(seq.perm, n),
                "throughput_points_per_sec": n / dt if dt > 0 else float("inf"),
            })
    return rows
