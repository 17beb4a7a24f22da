import time

import numpy as np
import pytest

from ustssm import tensor as T
from ustssm.nn import grad_check
from ustssm.ssm import (SsmParams, bi_ssm, discretize, recurrence_chunked, recurrence_sequential,
                        scan_chunked, scan_sequential, selective_params, ssm_forward)
from ustssm.tensor import Tensor


def params(seed, C=4, N=3, dt=(1e-3, 1e-1)):
    p = SsmParams.init(C, N, seed, *dt)
    rng = np.random.default_rng(seed + 100)
    p.D.data[:] = rng.normal(size=C)
    return p


def unrolled(p, x):
    """O(L^2) convolution form of the recurrence."""
    delta, Bm, Cm = selective_params(x, p)
    a, bbar = discretize(p.A, Bm, delta)
    L, C = x.shape
    y = np.zeros_like(x)
    for t in range(L):
        acc = np.zeros((C, p.d_state))
        for s in range(t + 1):
            prod = np.prod(a[s + 1:t + 1], axis=0) if s < t else np.ones_like(a[0])
            acc += prod * bbar[s] * x[s][:, None]
        y[t] = acc @ Cm[t] + p.D.data * x[t]
    return y


def test_selective_params_zero_input():
    p = params(0)
    p.b_delta.data[:] = 0
    delta, Bm, Cm = selective_params(np.zeros(4), p)
    np.testing.assert_allclose(delta, np.log(2), rtol=1e-15)
    assert np.array_equal(Bm, np.zeros(3)) and np.array_equal(Cm, np.zeros(3))


def test_delta_positive_on_many_draws():
    p = params(1)
    x = np.random.default_rng(0).normal(scale=5, size=(250_000, 4))
    assert np.all(selective_params(x, p)[0] > 0)


def test_discretize_examples():
    A_bar, B_bar = discretize(np.array([[-1.0]]), np.array([2.0]), np.array([np.log(2)]))
    assert A_bar[0, 0] == pytest.approx(0.5, abs=1e-15)
    assert B_bar[0, 0] == pytest.approx(2 * np.log(2))
    A_bar, B_bar = discretize(-np.ones((1, 1)), np.ones(1), np.array([1e-12]))
    assert 1 - A_bar[0, 0] < 1e-11 and B_bar[0, 0] < 1e-11
    A = -np.random.default_rng(0).uniform(0.01, 10, size=(5, 4))
    A_bar, _ = discretize(A, np.ones(4), np.random.default_rng(1).uniform(1e-4, 3, size=5))
    assert np.all((A_bar > 0) & (A_bar < 1))


def test_zero_input_zero_output():
    assert np.array_equal(scan_sequential(params(2), np.zeros((10, 4))), np.zeros((10, 4)))


def test_single_step():
    p = params(3)
    x = np.random.default_rng(3).normal(size=(1, 4))
    delta, Bm, Cm = selective_params(x[0], p)
    expect = (delta * x[0] * (Bm @ Cm)) + p.D.data * x[0]
    np.testing.assert_allclose(scan_sequential(p, x)[0], expect, atol=1e-14)


def test_w_b_zero_keeps_state_empty():
    p = params(4)
    p.W_B.data[:] = 0
    x = np.random.default_rng(4).normal(size=(20, 4))
    np.testing.assert_allclose(scan_sequential(p, x), p.D.data * x, atol=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_sequential_matches_unrolled(seed):
    p = params(seed, dt=(1e-2, 1.0))
    x = np.random.default_rng(seed).normal(size=(256, 4))
    np.testing.assert_allclose(scan_sequential(p, x), unrolled(p, x), atol=1e-9)


@pytest.mark.parametrize("chunk", [1, 3, 64, 100, 4096])
def test_chunked_matches_sequential(chunk):
    p = params(5, dt=(1e-2, 1.0))
    x = np.random.default_rng(5).normal(size=(2, 4096, 4))
    assert np.abs(scan_chunked(p, x, chunk) - scan_sequential(p, x)).max() < 1e-10


def test_recurrence_chunked_rejects_zero():
    with pytest.raises(ValueError):
        recurrence_chunked(np.ones((1, 3)), np.ones((1, 3)), 0)


def test_non_finite_state_reports_step():
    a = np.full((1, 5), 1.0)
    u = np.array([[1.0, 1.0, np.inf, 1.0, 1.0]])
    with pytest.raises(FloatingPointError, match="step 2"):
        recurrence_sequential(a, u)


def test_state_bound():
    rng = np.random.default_rng(6)
    a = rng.uniform(0.1, 0.9, size=(3, 500))
    u = rng.uniform(-1, 1, size=(3, 500))
    h = recurrence_sequential(a, u)
    assert np.abs(h).max() <= 1 / (1 - a.max()) + 1e-12


def median_time(fn, runs=5):
    times = []
    for _ in range(runs):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return float(np.median(times))


@pytest.mark.parametrize("which", ["sequential", "chunked"])
def test_scan_time_is_linear(which):
    p = params(7, C=16, N=8)
    rng = np.random.default_rng(7)
    xs = {L: rng.normal(size=(L, 16)) for L in (4096, 8192)}
    run = (lambda x: scan_sequential(p, x)) if which == "sequential" else (lambda x: scan_chunked(p, x, 64))
    ratio = median_time(lambda: run(xs[8192])) / median_time(lambda: run(xs[4096]))
    assert 1.5 <= ratio <= 2.8, ratio


# ---------------------------------------------------------------- differentiable path

def test_ssm_forward_matches_numpy():
    p = params(8)
    x = np.random.default_rng(8).normal(size=(2, 30, 4))
    np.testing.assert_allclose(ssm_forward(Tensor(x), p).data, scan_sequential(p, x), atol=1e-13)
    np.testing.assert_allclose(ssm_forward(Tensor(x), p, chunk=7).data, scan_sequential(p, x), atol=1e-12)


def test_bi_ssm_zeroed_backward_is_forward_only():
    f, b = params(9), params(10)
    b.W_B.data[:] = 0
    b.D.data[:] = 0
    x = np.random.default_rng(9).normal(size=(1, 25, 4))
    np.testing.assert_allclose(bi_ssm(Tensor(x), f, b).data, scan_sequential(f, x), atol=1e-14)


def test_bi_ssm_palindrome():
    p = params(11)
    half = np.random.default_rng(11).normal(size=(1, 10, 4))
    x = np.concatenate([half, half[:, ::-1]], axis=1)
    y = bi_ssm(Tensor(x), p, p).data
    np.testing.assert_allclose(y, y[:, ::-1], atol=1e-13)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("chunk", [None, 3])
def test_bi_ssm_gradient(seed, chunk):
    f, b = params(seed, dt=(1e-2, 1.0)), params(seed + 50, dt=(1e-2, 1.0))
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 9, 4)), requires_grad=True)
    w = rng.normal(size=(2, 9, 4))
    rep = grad_check(lambda x, *ps: T.sum_(T.mul(bi_ssm(x, f, b, chunk), w)),
                     [x] + f.parameters() + b.parameters())
    assert rep.passed, str(rep)
