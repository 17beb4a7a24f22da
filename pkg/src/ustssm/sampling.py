"""Farthest-point sampling, windowed k-NN grouping and two-stage temporal sampling.

Temporal interaction sampling (TIS) runs a stride-1 set abstraction over every
frame (grouping over the frame and its two neighbours), then keeps every second
frame as an anchor and refines it with a second set abstraction grouped over
the stride-1 features of the anchor frame and its two neighbours.  Each anchor
therefore sees raw frames ``f-2 .. f+2``.

All geometric choices (FPS, k-NN) depend only on coordinates, so they are
precomputed once per video as a :class:`TisPlan`; only the set-abstraction MLPs
carry gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MlpSpec, derive_seed, init_mlp, mlp_forward
from .tensor import Tensor


def fps(points: np.ndarray, n_samples: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling; ties go to the smallest index."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if not 1 <= n_samples <= n:
        raise ValueError(f"n_samples must be in [1, {n}], got {n_samples}")
    if not 0 <= seed_index < n:
        raise ValueError("seed_index out of range")
    chosen = np.empty(n_samples, dtype=np.intp)
    chosen[0] = seed_index
    d = np.sum((points - points[seed_index]) ** 2, axis=1)
    for i in range(1, n_samples):
        nxt = int(np.argmax(d))
        chosen[i] = nxt
        d = np.minimum(d, np.sum((points - points[nxt]) ** 2, axis=1))
    return chosen


def fps_seed(points: np.ndarray) -> int:
    """Order-independent FPS start: the point farthest from the centroid."""
    c = points.mean(axis=0)
    return int(np.argmax(np.sum((points - c) ** 2, axis=1)))


def window_frames(f: int, n_frames: int) -> list:
    """Frames ``{f-1, f, f+1}`` clamped to the clip (as a sorted set)."""
    return sorted({min(max(g, 0), n_frames - 1) for g in (f - 1, f, f + 1)})


def knn_rows(queries: np.ndarray, candidates: np.ndarray, k: int) -> tuple:
    """k nearest candidates per query by Euclidean distance, ties by candidate order."""
    diff = queries[:, None, :] - candidates[None, :, :]
    d2 = np.sum(diff * diff, axis=-1)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(d2, order, axis=1)


@dataclass
class Neighborhood:
    anchor_index: tuple
    member_indices: np.ndarray  # k x 2 (frame, point)
    relative_coords: np.ndarray  # k x 3
    member_feats: np.ndarray  # k x C


def point_feats(video) -> np.ndarray:
    """Per-point input features; coordinates stand in when the video carries none."""
    return video.coords if video.feats is None else video.feats


def group_window(video, anchor: tuple, k: int) -> Neighborhood:
    if k < 1:
        raise ValueError("k must be >= 1")
    f, p = anchor
    frames = window_frames(f, video.T)
    cand = video.coords[frames].reshape(-1, 3)
    k = min(k, len(cand))
    order, _ = knn_rows(video.coords[f, p][None], cand, k)
    order = order[0]
    fr = np.asarray(frames)[order // video.N]
    pt = order % video.N
    feats = point_feats(video)
    return Neighborhood(
        anchor_index=(f, p),
        member_indices=np.stack([fr, pt], axis=1),
        relative_coords=video.coords[fr, pt] - video.coords[f, p],
        member_feats=feats[fr, pt],
    )


def set_abstraction_batch(inputs, spec: MlpSpec, params) -> Tensor:
    """Shared MLP over ``[..., members, d]`` rows followed by a max over members."""
    if spec.activations[-1] != "relu":
        return T.max_(mlp_forward(inputs, spec, params), axis=-2)
    head = MlpSpec(spec.layer_widths[:-1], spec.activations[:-1]) if len(spec.activations) > 1 else None
    x = mlp_forward(inputs, head, params[:-2]) if head else T.as_tensor(inputs)
    return T.linear_relu_max(x, params[-2], params[-1])


def set_abstraction(nbhd: Neighborhood, spec: MlpSpec, params) -> Tensor:
    x = np.concatenate([nbhd.relative_coords, nbhd.member_feats], axis=1)
    return set_abstraction_batch(x, spec, params)


@dataclass
class TisWeights:
    """Both set-abstraction MLPs.

    Each member enters as ``[dx dy dz dt | feats]``, where ``dt`` is its frame
    minus the anchor frame; without it a neighbour from the next frame looks
    the same as one from the anchor's own frame and motion is invisible.
    ``offset_scale`` multiplies the spatial offsets; neighbourhoods in a
    unit-radius clip are a few hundredths wide, so raw offsets would be
    swamped by the absolute-position features.
    """

    stage1: MlpSpec
    stage2: MlpSpec
    params1: list
    params2: list
    offset_scale: float = 10.0

    @classmethod
    def init(cls, c_in: int, channels: int, seed: int, hidden: int | None = None,
             offset_scale: float = 10.0):
        hidden = hidden or max(channels // 2, 1)
        s1 = MlpSpec((4 + c_in, hidden, channels), ("relu", "relu"), derive_seed(seed, 1))
        s2 = MlpSpec((4 + channels, channels, channels), ("relu", "relu"), derive_seed(seed, 2))
        return cls(s1, s2, init_mlp(s1), init_mlp(s2), float(offset_scale))

    def parameters(self) -> list:
        return self.params1 + self.params2


@dataclass
class TisPlan:
    """Coordinate-only index structure for one video."""

    n_frames: int
    n_points: int
    anchors: np.ndarray  # T x n_s point indices chosen by FPS
    anchor_coords: np.ndarray  # T x n_s x 3
    s1_frames: np.ndarray  # frames that get a stride-1 feature
    s1_members: np.ndarray  # len(s1_frames) x n_s x k, flat raw indices f*N + p
    s1_rel: np.ndarray  # len(s1_frames) x n_s x k x 3
    s1_dt: np.ndarray  # len(s1_frames) x n_s x k, member frame - anchor frame
    out_frames: np.ndarray  # sampled (anchor) frames, 0-based
    s2_members: np.ndarray | None  # T' x n_s x k, rows into the stage-1 output
    s2_rel: np.ndarray | None
    s2_dt: np.ndarray | None

    @property
    def n_out(self) -> int:
        return len(self.out_frames)

    @property
    def n_spatial(self) -> int:
        return self.anchors.shape[1]


def make_tis_plan(coords: np.ndarray, n_spatial: int, k: int, interaction: bool = True) -> TisPlan:
    """Precompute FPS anchors and both grouping stages.

    With ``interaction=False`` the plan is plain stride-2 sampling: one set
    abstraction per anchor frame over its three-frame window.
    """
    n_frames, n_points, _ = coords.shape
    if n_frames < 2:
        raise ValueError("temporal sampling needs T >= 2")
    if k < 1:
        raise ValueError("k must be >= 1")
    anchors = np.stack([fps(coords[f], n_spatial, fps_seed(coords[f])) for f in range(n_frames)])
    anchor_coords = np.take_along_axis(coords, anchors[:, :, None], axis=1)
    out_frames = np.arange(1, n_frames, 2)
    s1_frames = np.arange(n_frames) if interaction else out_frames

    s1_members, s1_rel, s1_dt = [], [], []
    for f in s1_frames:
        frames = window_frames(int(f), n_frames)
        cand = coords[frames].reshape(-1, 3)
        kk = min(k, len(cand))
        order, _ = knn_rows(anchor_coords[f], cand, kk)
        flat = np.asarray(frames)[order // n_points] * n_points + order % n_points
        s1_members.append(flat)
        s1_rel.append(cand[order] - anchor_coords[f][:, None, :])
        s1_dt.append(flat // n_points - f)
    s1_members, s1_rel, s1_dt = np.stack(s1_members), np.stack(s1_rel), np.stack(s1_dt)

    s2_members = s2_rel = s2_dt = None
    if interaction:
        s2_members, s2_rel, s2_dt = [], [], []
        for f in out_frames:
            frames = window_frames(int(f), n_frames)
            cand = anchor_coords[frames].reshape(-1, 3)
            kk = min(k, len(cand))
            order, _ = knn_rows(anchor_coords[f], cand, kk)
            rows = np.asarray(frames)[order // n_spatial] * n_spatial + order % n_spatial
            s2_members.append(rows)
            s2_rel.append(cand[order] - anchor_coords[f][:, None, :])
            s2_dt.append(rows // n_spatial - f)
        s2_members, s2_rel, s2_dt = np.stack(s2_members), np.stack(s2_rel), np.stack(s2_dt)
    return TisPlan(n_frames, n_points, anchors, anchor_coords, s1_frames, s1_members, s1_rel,
                   s1_dt, out_frames, s2_members, s2_rel, s2_dt)


def offsets4d(rel: np.ndarray, dt: np.ndarray, offset_scale: float = 1.0) -> np.ndarray:
    """``[scaled dx dy dz | dt]`` per member."""
    return np.concatenate([rel * offset_scale, dt[..., None].astype(np.float64)], axis=-1)


def stage1_inputs(plan: TisPlan, feats: np.ndarray, offset_scale: float = 1.0) -> np.ndarray:
    """``[4D offset | member features]`` rows for the stride-1 set abstraction."""
    flat = feats.reshape(-1, feats.shape[-1])
    return np.concatenate([offsets4d(plan.s1_rel, plan.s1_dt, offset_scale),
                           flat[plan.s1_members]], axis=-1)


def tis_forward(plans, feats_list, weights: TisWeights) -> Tensor:
    """Batched sampling features, shape ``(B, T', n_s, C)``.

    ``feats_list`` holds each video's raw ``T x N x C0`` point features.
    """
    x1 = np.concatenate([stage1_inputs(p, f, weights.offset_scale)
                         for p, f in zip(plans, feats_list)])
    k1 = x1.shape[-2]
    x1 = x1.reshape(-1, k1, x1.shape[-1])
    h1 = set_abstraction_batch(x1, weights.stage1, weights.params1)
    B = len(plans)
    n_s = plans[0].n_spatial
    n_out = plans[0].n_out
    channels = weights.stage1.d_out
    if plans[0].s2_members is None:
        return T.reshape(h1, (B, n_out, n_s, channels))
    rows_per_video = len(plans[0].s1_frames) * n_s
    idx = np.concatenate([p.s2_members + b * rows_per_video for b, p in enumerate(plans)])
    k2 = idx.shape[-1]
    rel = np.concatenate([offsets4d(p.s2_rel, p.s2_dt, weights.offset_scale)
                          for p in plans]).reshape(-1, k2, 4)
    h2 = _stage2(h1, idx.reshape(-1), rel, weights)
    return T.reshape(h2, (B, n_out, n_s, channels))


def _stage2(h1: Tensor, idx: np.ndarray, rel: np.ndarray, weights: TisWeights) -> Tensor:
    """Second set abstraction over gathered stage-1 rows.

    The first layer is split as ``rel @ W[:4] + (h1 @ W[4:])[idx]``, so the
    wide feature projection runs once per stage-1 row instead of once per
    member.  The result equals ``set_abstraction_batch`` on ``[rel | h1[idx]]``.
    """
    spec = weights.stage2
    if spec.activations != ("relu", "relu"):
        members = T.reshape(T.take(h1, idx), rel.shape[:2] + (h1.shape[-1],))
        return set_abstraction_batch(T.concat([Tensor(rel), members], axis=-1), spec, weights.params2)
    W0, b0, W1, b1 = weights.params2
    proj = T.matmul(h1, T.index(W0, slice(4, None)))
    gathered = T.reshape(T.take(proj, idx), rel.shape[:2] + (proj.shape[-1],))
    hidden = T.relu(T.add(gathered, T.add(T.matmul(Tensor(rel), T.index(W0, slice(0, 4))), b0)))
    return T.linear_relu_max(hidden, W1, b1)


@dataclass
class SampledSequence:
    anchors: np.ndarray  # T' x N' x 3
    feats: Tensor  # T' x N' x C
    source_frames: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.anchors.shape[0]

    @property
    def n_points(self) -> int:
        return self.anchors.shape[1]


def tis(video, n_spatial: int, k: int, weights: TisWeights, interaction: bool = True) -> SampledSequence:
    if video.T < 2:
        raise ValueError("temporal sampling needs T >= 2")
    plan = make_tis_plan(video.coords, n_spatial, k, interaction)
    feats = tis_forward([plan], [point_feats(video)], weights)
    out = T.reshape(feats, feats.shape[1:])
    return SampledSequence(plan.anchor_coords[plan.out_frames], out, plan.out_frames)
