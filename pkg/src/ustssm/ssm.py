"""Selective state-space scan with a diagonal negative-real state matrix.

Per channel ``c`` and state ``n``::

    delta_t = softplus(x_t W_delta + b_delta)          (per channel, > 0)
    B_t = x_t W_B,  C_t = x_t W_C                       (per state, shared by channels)
    a_t = exp(delta_t[c] * A[c, n])                     zero-order hold
    h_t = a_t * h_{t-1} + delta_t[c] * B_t[n] * x_t[c]  Euler input
    y_t[c] = sum_n C_t[n] h_t[c, n] + D[c] x_t[c]

The recurrence ``h_t = a_t h_{t-1} + u_t`` is associative under
``(a, b) o (a', b') = (a a', a' b + b')``, which :func:`recurrence_chunked`
uses to evaluate it with ``chunk + L/chunk`` serial steps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import derive_seed, xavier_init
from .tensor import Tensor


def recurrence_sequential(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``h_t = a_t * h_{t-1} + u_t`` along axis 1 with ``h_{-1} = 0``."""
    h = np.empty_like(u)
    state = np.zeros_like(u[:, 0])
    for t in range(u.shape[1]):
        state = a[:, t] * state + u[:, t]
        h[:, t] = state
    _check_finite(h)
    return h


def _check_finite(h: np.ndarray):
    if not np.all(np.isfinite(h)):
        bad = np.argwhere(~np.isfinite(h))[0]
        raise FloatingPointError(f"non-finite scan state at step {bad[1]}")


def recurrence_chunked(a: np.ndarray, u: np.ndarray, chunk: int) -> np.ndarray:
    """Same recurrence as :func:`recurrence_sequential`, chunk-parallel.

    Every chunk is scanned locally from a zero state (all chunks at once), the
    chunk summaries are folded serially with the associative combinator, and
    each position is corrected by ``cumulative_a * carry_in``.
    """
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    B, L = u.shape[:2]
    rest = u.shape[2:]
    chunk = min(chunk, max(L, 1))
    n_chunks = -(-L // chunk)
    pad = n_chunks * chunk - L
    if pad:
        widths = [(0, 0), (0, pad)] + [(0, 0)] * len(rest)
        a = np.pad(a, widths, constant_values=1.0)
        u = np.pad(u, widths)
    a = a.reshape((B, n_chunks, chunk) + rest)
    u = u.reshape((B, n_chunks, chunk) + rest)

    h_loc = np.empty_like(u)
    a_cum = np.empty_like(a)
    state = np.zeros((B, n_chunks) + rest)
    prod = np.ones((B, n_chunks) + rest)
    for j in range(chunk):
        state = a[:, :, j] * state + u[:, :, j]
        prod = prod * a[:, :, j]
        h_loc[:, :, j] = state
        a_cum[:, :, j] = prod

    carry_in = np.empty((B, n_chunks) + rest)
    carry = np.zeros((B,) + rest)
    for i in range(n_chunks):
        carry_in[:, i] = carry
        carry = a_cum[:, i, -1] * carry + h_loc[:, i, -1]
    h = h_loc + a_cum * carry_in[:, :, None]
    h = h.reshape((B, n_chunks * chunk) + rest)[:, :L]
    _check_finite(h)
    return h


def default_chunk(length: int) -> int:
    return max(1, math.isqrt(max(length, 1)))


def _recurrence(a, u, chunk):
    if chunk is None:
        return recurrence_sequential(a, u)
    return recurrence_chunked(a, u, chunk)


@dataclass
class SsmParams:
    W_delta: Tensor  # C x C
    b_delta: Tensor  # C
    W_B: Tensor  # C x N
    W_C: Tensor  # C x N
    A_log: Tensor  # C x N, A = -exp(A_log) < 0
    D: Tensor  # C

    @classmethod
    def init(cls, channels: int, d_state: int = 8, seed: int = 0,
             dt_min: float = 1e-3, dt_max: float = 1e-1):
        rng = np.random.default_rng(derive_seed(seed, 5))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=channels))
        b_delta = dt + np.log(-np.expm1(-dt))  # inverse softplus
        a_init = np.tile(np.arange(1, d_state + 1, dtype=np.float64), (channels, 1))
        return cls(
            W_delta=xavier_init(channels, channels, derive_seed(seed, 1)),
            b_delta=Tensor(b_delta, requires_grad=True),
            W_B=xavier_init(channels, d_state, derive_seed(seed, 2)),
            W_C=xavier_init(channels, d_state, derive_seed(seed, 3)),
            A_log=Tensor(np.log(a_init), requires_grad=True),
            D=Tensor(np.ones(channels), requires_grad=True),
        )

    @property
    def channels(self) -> int:
        return self.D.shape[0]

    @property
    def d_state(self) -> int:
        return self.A_log.shape[1]

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.A_log.data)

    def parameters(self) -> list:
        return [self.W_delta, self.b_delta, self.W_B, self.W_C, self.A_log, self.D]


def softplus_np(x):
    return np.logaddexp(0.0, x)


def selective_params(x_t: np.ndarray, params: SsmParams) -> tuple:
    """``(delta, B, C)`` for input rows ``x_t`` (any leading shape)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    delta = softplus_np(x_t @ params.W_delta.data + params.b_delta.data)
    return delta, x_t @ params.W_B.data, x_t @ params.W_C.data


def discretize(A: np.ndarray, B_t: np.ndarray, delta_t: np.ndarray) -> tuple:
    """Zero-order hold on ``A`` and Euler on ``B``: per-channel ``(A_bar, B_bar)`` of shape ``C x N``."""
    delta_t = np.asarray(delta_t, dtype=np.float64)
    A_bar = np.exp(delta_t[..., :, None] * A)
    B_bar = delta_t[..., :, None] * np.asarray(B_t)[..., None, :]
    return A_bar, B_bar


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 2 else (x, False)


def _scan_np(params: SsmParams, x: np.ndarray, chunk):
    xb, squeeze = _batched(x)
    delta, Bm, Cm = selective_params(xb, params)
    a, u = discretize(params.A, Bm, delta)
    u = u * xb[..., None]
    h = _recurrence(a, u, chunk)
    y = np.einsum("blcn,bln->blc", h, Cm) + params.D.data * xb
    return y[0] if squeeze else y


def scan_sequential(params: SsmParams, x: np.ndarray) -> np.ndarray:
    """Reference left-to-right evaluation; ``x`` is ``L x C`` or ``B x L x C``."""
    return _scan_np(params, x, None)


def scan_chunked(params: SsmParams, x: np.ndarray, chunk: int) -> np.ndarray:
    return _scan_np(params, x, chunk)


def selective_scan(x: Tensor, delta: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor, D: Tensor,
                   chunk: int | None = None) -> Tensor:
    """Fused differentiable scan over ``x`` of shape ``B x L x C``.

    The backward pass is itself a reversed linear recurrence:
    ``gh_t = gy_t C_t + a_{t+1} gh_{t+1}``.
    """
    xd, dd, Ad, Bd, Cd = x.data, delta.data, A.data, Bm.data, Cm.data
    a = np.exp(dd[..., None] * Ad)
    dBx = (dd * xd)[..., None]
    u = dBx * Bd[:, :, None, :]
    h = _recurrence(a, u, chunk)
    y = np.einsum("blcn,bln->blc", h, Cd) + D.data * xd

    def backward(gy):
        g_src = gy[..., None] * Cd[:, :, None, :]
        a_next = np.zeros_like(a)
        a_next[:, :-1] = a[:, 1:]
        gh = _recurrence(np.flip(a_next, 1), np.flip(g_src, 1), chunk)
        gh = np.flip(gh, 1)
        h_prev = np.zeros_like(h)
        h_prev[:, 1:] = h[:, :-1]
        ga_a = gh * h_prev * a  # d/d(delta*A) of the decay term
        gC = np.einsum("blc,blcn->bln", gy, h)
        gD = np.einsum("blc,blc->c", gy, xd)
        ghB = np.einsum("blcn,bln->blc", gh, Bd)
        gx = gy * D.data + ghB * dd
        gdelta = np.einsum("blcn,cn->blc", ga_a, Ad) + ghB * xd
        gA = np.einsum("blcn,blc->cn", ga_a, dd)
        gB = np.einsum("blcn,blc->bln", gh, dd * xd)
        return gx, gdelta, gA, gB, gC, gD

    return T.custom_op(y, (x, delta, A, Bm, Cm, D), backward)


def ssm_forward(x: Tensor, params: SsmParams, chunk: int | None = None) -> Tensor:
    """Selective scan of ``x`` (``B x L x C``) with input-dependent parameters."""
    delta = T.softplus(T.matmul(x, params.W_delta) + params.b_delta)
    Bm = T.matmul(x, params.W_B)
    Cm = T.matmul(x, params.W_C)
    A = T.neg(T.exp(params.A_log))
    return selective_scan(x, delta, A, Bm, Cm, params.D, chunk)


def bi_ssm(x: Tensor, fwd: SsmParams, bwd: SsmParams, chunk: int | None = None) -> Tensor:
    """Forward scan plus the re-reversed scan of the reversed sequence (separate parameters)."""
    y_f = ssm_forward(x, fwd, chunk)
    y_b = T.flip(ssm_forward(T.flip(x, 1), bwd, chunk), 1)
    return y_f + y_b
