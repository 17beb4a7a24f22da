"""Layers, losses, the optimizer and the finite-difference gradient checker."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad

ACTIVATIONS = ("relu", "none")


class NonFiniteGradientError(FloatingPointError):
    """Raised when an optimizer step sees NaN/inf gradients; parameters are left untouched."""


def derive_seed(seed: int, *keys: int) -> int:
    """Independent child seed for sub-component ``keys`` of a seeded object."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def xavier_init(fan_in: int, fan_out: int, seed: int, gain: float = 1.0) -> Tensor:
    """Glorot-uniform ``(fan_in, fan_out)`` weight, a pure function of ``seed``."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"xavier_init needs positive fans, got ({fan_in}, {fan_out})")
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)


@dataclass(frozen=True)
class MlpSpec:
    """Widths include the input width: ``(d_in, h_1, ..., d_out)``."""

    layer_widths: tuple
    activations: tuple = None
    init_seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"MLP needs >= 1 layer and positive widths, got {widths}")
        acts = self.activations
        if acts is None:
            acts = ("relu",) * (len(widths) - 2) + ("none",)
        acts = tuple(acts)
        if len(acts) != len(widths) - 1 or any(a not in ACTIVATIONS for a in acts):
            raise ValueError(f"bad activations {acts} for widths {widths}")
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "activations", acts)

    @property
    def d_in(self) -> int:
        return self.layer_widths[0]

    @property
    def d_out(self) -> int:
        return self.layer_widths[-1]

    def n_params(self) -> int:
        w = self.layer_widths
        return sum(a * b + b for a, b in zip(w[:-1], w[1:]))


def init_mlp(spec: MlpSpec) -> list:
    """Xavier weights and zero biases, flattened as ``[W0, b0, W1, b1, ...]``."""
    weights = []
    for i, (a, b) in enumerate(zip(spec.layer_widths[:-1], spec.layer_widths[1:])):
        weights.append(xavier_init(a, b, derive_seed(spec.init_seed, i)))
        weights.append(Tensor(np.zeros(b), requires_grad=True))
    return weights


def mlp_forward(x, spec: MlpSpec, weights) -> Tensor:
    x = T.as_tensor(x)
    if x.shape[-1] != spec.d_in:
        raise ValueError(f"MLP input width {x.shape[-1]} != {spec.d_in}")
    for i, act in enumerate(spec.activations):
        x = T.linear(x, weights[2 * i], weights[2 * i + 1], act)
    return x


def softmax(x, axis: int = -1) -> Tensor:
    return T.softmax(T.as_tensor(x), axis)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.intp)
    n, n_cls = logits.shape
    if labels.shape != (n,):
        raise ValueError("labels must have one entry per logits row")
    if np.any(labels < 0) or np.any(labels >= n_cls):
        raise ValueError(f"labels outside [0, {n_cls})")
    lp = T.log_softmax(logits, axis=1).data
    rows = np.arange(n)
    loss = -lp[rows, labels].mean()

    def backward(g):
        d = np.exp(lp)
        d[rows, labels] -= 1.0
        return (g * d / n,)

    return T.custom_op(np.asarray(loss), (logits,), backward)


def sgd_step(params, grads, velocities, lr: float, momentum: float):
    """In-place momentum SGD: ``v = momentum * v + g``, ``p -= lr * v``.

    All gradients are validated before any parameter moves.
    """
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter #{i}")
    for p, g, v in zip(params, grads, velocities):
        if p.shape != v.shape or (g is not None and g.shape != p.shape):
            raise ValueError("sgd_step shape mismatch")
        v *= momentum
        if g is not None:
            v += g
        p.data -= lr * v


class SGD:
    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        sgd_step(self.params, [p.grad for p in self.params], self.velocities,
                 self.lr, self.momentum)


@dataclass
class GradCheckReport:
    tol: float
    max_errors: dict = field(default_factory=dict)
    worst: dict = field(default_factory=dict)
    n_checked: int = 0

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.max_errors.values())

    @property
    def max_error(self) -> float:
        return max(self.max_errors.values(), default=0.0)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        parts = ", ".join(f"{k}={v:.2e}" for k, v in self.max_errors.items())
        return f"grad_check {status} (tol={self.tol:g}, {self.n_checked} entries): {parts}"


def grad_check(fn, inputs, tol: float = 1e-4, h: float = 1e-5,
               max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``fn(*inputs)`` with central differences.

    The error per entry is ``|a - f| / max(1, |a|, |f|)``.  With ``max_entries``
    each input is probed on a seeded random subset of its coordinates.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    out.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for i, t in enumerate(inputs):
        name = t.name or f"input{i}"
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst, worst_at = 0.0, None
        a_flat = analytic[i].reshape(-1)
        with no_grad():
            for j in coords:
                orig = flat[j]
                flat[j] = orig + h
                fp = fn(*inputs).data.item()
                flat[j] = orig - h
                fm = fn(*inputs).data.item()
                flat[j] = orig
                f = (fp - fm) / (2 * h)
                a = a_flat[j]
                err = abs(a - f) / max(1.0, abs(a), abs(f))
                if err > worst or worst_at is None:
                    worst, worst_at = err, (int(j), float(a), float(f))
        report.max_errors[name] = worst
        report.worst[name] = worst_at
        report.n_checked += len(coords)
    return report
