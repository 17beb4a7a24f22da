import numpy as np
import pytest

from ustssm import tensor as T
from ustssm.nn import MlpSpec, grad_check, init_mlp
from ustssm.stsa import (StsaParams, exp_pool, init_temporal_embedding, knn4d, neighbors_for,
                         pooling_weights, received_weight, relative_normalize, stsa_block)
from ustssm.tensor import Tensor


def brute_knn(coords, emb, k):
    L = len(coords)
    out = []
    for c in range(L):
        m = [np.linalg.norm(coords[c] - coords[j]) + np.linalg.norm(emb[c] - emb[j]) for j in range(L)]
        out.append(sorted(range(L), key=lambda j: (m[j], j))[:k])
    return np.array(out)


# ---------------------------------------------------------------- 4-D k-NN

@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("method", ["brute", "tree"])
def test_knn4d_matches_exhaustive_sort(seed, method):
    rng = np.random.default_rng(seed)
    L = int(rng.integers(20, 120))
    coords = rng.uniform(size=(L, 3))
    emb = rng.normal(scale=0.3, size=(4, 4))[rng.integers(0, 4, size=L)]
    nbr, dist = knn4d(coords, emb, 7, method)
    assert np.array_equal(nbr, brute_knn(coords, emb, 7))
    assert np.all(np.diff(dist, axis=1) >= 0)
    assert np.array_equal(nbr[:, 0], np.arange(L))


def test_knn4d_tree_agrees_with_brute_above_threshold():
    rng = np.random.default_rng(7)
    coords = rng.uniform(size=(512, 3))
    emb = np.repeat(rng.normal(scale=0.2, size=(8, 4)), 64, axis=0)
    a, da = knn4d(coords, emb, 8, "brute")
    b, db = knn4d(coords, emb, 8, "tree")
    assert np.array_equal(a, b)
    np.testing.assert_allclose(da, db, atol=1e-12)


def test_knn4d_constant_embedding_is_spatial_knn():
    rng = np.random.default_rng(1)
    coords = rng.normal(size=(300, 3))
    nbr, _ = knn4d(coords, np.ones((300, 4)), 5)
    d = np.linalg.norm(coords[:, None] - coords[None], axis=-1)
    ref = np.lexsort((np.broadcast_to(np.arange(300), d.shape), d), axis=1)[:, :5]
    assert np.array_equal(nbr, ref)


def test_knn4d_large_embeddings_stay_in_frame():
    rng = np.random.default_rng(2)
    frame = np.repeat(np.arange(4), 25)
    emb = np.repeat(frame[:, None] * 1e6, 4, axis=1).astype(float)
    nbr, _ = knn4d(rng.uniform(size=(100, 3)), emb, 10)
    assert np.all(frame[nbr] == frame[:, None])


def test_knn4d_rejects_bad_k():
    with pytest.raises(ValueError):
        knn4d(np.zeros((3, 3)), np.zeros((3, 4)), 4)
    with pytest.raises(ValueError):
        knn4d(np.zeros((3, 3)), np.zeros((3, 4)), 0)
    with pytest.raises(ValueError):
        knn4d(np.zeros((3, 3)), np.zeros((3, 4)), 2, method="grid")


def test_temporal_embedding_init():
    e = init_temporal_embedding(8, 4, seed=0).data
    assert e.shape == (8, 4)
    np.testing.assert_allclose(e.mean(axis=1), np.arange(8) / 8, atol=0.02)


# ---------------------------------------------------------------- relative normalize / pooling

def test_relative_normalize_identical_rows():
    fc = np.array([1.0, -2.0, 3.0])
    out = relative_normalize(np.tile(fc, (4, 1)), fc).data
    assert np.array_equal(out[:, :3], np.zeros((4, 3)))
    assert np.array_equal(out[:, 3:], np.tile(fc, (4, 1)))


def test_relative_normalize_unit_and_scale_invariant():
    rng = np.random.default_rng(0)
    fc = rng.normal(size=5)
    diff = rng.normal(size=(6, 5))
    a = relative_normalize(fc + diff, fc).data[:, :5]
    b = relative_normalize(fc + 1e3 * diff, fc).data[:, :5]
    norms = np.linalg.norm(a, axis=1)
    assert np.all(np.abs(norms - 1) <= 1e-6 / np.linalg.norm(diff, axis=1) + 1e-12)
    np.testing.assert_allclose(a, b, atol=1e-5)
    with pytest.raises(ValueError):
        relative_normalize(fc[None], fc, eps=0.0)


def pool_setup(seed, k=5, c=3):
    rng = np.random.default_rng(seed)
    spec = MlpSpec((2 * c, 4, c), ("relu", "none"), init_seed=seed)
    params = init_mlp(spec)
    for b in params[1::2]:
        b.data[:] = rng.normal(scale=0.2, size=b.shape)
    return rng, spec, params


def test_exp_pool_single_and_identical_rows():
    _, spec, params = pool_setup(0)
    row = np.random.default_rng(1).normal(size=(1, 6))
    from ustssm.nn import mlp_forward
    np.testing.assert_allclose(exp_pool(row, spec, params).data, mlp_forward(row[0], spec, params).data,
                               atol=1e-14)
    same = np.tile(row, (4, 1))
    np.testing.assert_allclose(exp_pool(same, spec, params).data, mlp_forward(row[0], spec, params).data,
                               atol=1e-14)


def test_pooling_weights_are_channel_distributions():
    w = pooling_weights(Tensor(np.random.default_rng(2).normal(size=(10, 7, 6)))).data
    assert np.all(w > 0)
    assert np.abs(w.sum(axis=-2) - 1).max() < 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_relative_normalize_gradient(seed):
    rng = np.random.default_rng(seed)
    fk = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    fc = Tensor(rng.normal(size=4), requires_grad=True)
    w = rng.normal(size=(5, 8))
    rep = grad_check(lambda a, b: T.sum_(T.mul(relative_normalize(a, b), w)), [fk, fc])
    assert rep.passed, str(rep)


@pytest.mark.parametrize("seed", range(10))
def test_exp_pool_gradient(seed):
    rng, spec, params = pool_setup(seed)
    fp = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
    w = rng.normal(size=3)
    rep = grad_check(lambda x, *p: T.sum_(T.mul(exp_pool(x, spec, p), w)), [fp] + params)
    assert rep.passed, str(rep)


# ---------------------------------------------------------------- block

def block_setup(seed, L=24, C=4, frames=3):
    rng = np.random.default_rng(seed)
    params = StsaParams.init(C, frames, seed=seed)
    for b in params.mlp[1::2]:
        b.data[:] = rng.normal(scale=0.2, size=b.shape)
    coords = rng.uniform(size=(L, 3))
    frame_of = np.sort(rng.integers(0, frames, size=L))
    return rng, params, coords, frame_of, rng.normal(size=(L, C))


def test_stsa_zero_mlp_is_identity():
    _, params, coords, frame_of, x = block_setup(0)
    for t in params.mlp:
        t.data[:] = 0
    assert np.array_equal(stsa_block(x, coords, frame_of, params).data, x)


def test_stsa_permutation_equivariance():
    rng, params, coords, frame_of, x = block_setup(1)
    base = stsa_block(x, coords, frame_of, params).data
    p = rng.permutation(len(x))
    moved = stsa_block(x[p], coords[p], frame_of[p], params).data
    np.testing.assert_allclose(moved, base[p], atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_stsa_block_gradient(seed):
    rng, params, coords, frame_of, x = block_setup(seed, L=12, C=3)
    xt = Tensor(x, requires_grad=True)
    w = rng.normal(size=x.shape)
    rep = grad_check(lambda a, *p: T.sum_(T.mul(stsa_block(a, coords, frame_of, params, k=4), w)),
                     [xt] + params.mlp)
    assert rep.passed, str(rep)


def test_stsa_adds_no_parameters_beyond_mlp_and_embedding():
    params = StsaParams.init(16, 8, d_t=4)
    assert sum(t.size for t in params.parameters()) == params.spec.n_params() + 8 * 4


def test_neighbors_are_per_clip_and_received_weight():
    rng = np.random.default_rng(3)
    coords = rng.uniform(size=(2, 10, 3))
    frame_of = np.repeat(np.arange(2), 5)[None].repeat(2, 0)
    nbr = neighbors_for(coords, frame_of, np.zeros((2, 4)), 3)
    assert nbr[0].max() < 10 and nbr[1].min() >= 10
    w = np.full((20, 3, 2), 1 / 3)
    mass = received_weight(nbr, w, 20)
    assert mass.sum() == pytest.approx(20.0)
