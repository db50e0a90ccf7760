import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvplnmix.errors import DegenerateComponentError
from mvplnmix.initialization import (
    InitSpec,
    best_of_runs,
    init_params,
    initialize,
    kmeans_candidates,
    kmeans_init,
    lloyd,
    random_init,
)
from mvplnmix.selection import ari
from mvplnmix.simgen import generate, preset
from mvplnmix.tensor_io import CountTensor


def _blobs(rng, n=40):
    low = rng.poisson(3, size=(n, 2, 3))
    high = rng.poisson(3 * math.exp(10), size=(n, 2, 3))
    return CountTensor(np.concatenate([low, high])), np.repeat([0, 1], n)


def test_separated_blobs():
    tensor, truth = _blobs(np.random.default_rng(1))
    labels = kmeans_init(tensor, 2, InitSpec("kmeans", 3, 7))
    assert ari(labels, truth) == 1.0


def test_single_cluster():
    tensor, _ = _blobs(np.random.default_rng(2))
    np.testing.assert_array_equal(kmeans_init(tensor, 1), 0)


def test_saturation():
    X = np.random.default_rng(3).normal(size=(6, 2))
    labels, wcss = lloyd(X, 6, np.random.default_rng(0))
    assert sorted(labels) == list(range(6)) and wcss == 0.0


def test_empty_cluster_repair():
    # duplicated points force an empty cluster that must be repaired
    X = np.array([[0.0], [0.0], [0.0], [0.0], [5.0], [9.0]])
    for seed in range(20):
        labels, _ = lloyd(X, 3, np.random.default_rng(seed))
        assert len(set(labels)) == 3


def test_g_larger_than_n():
    with pytest.raises(ValueError):
        lloyd(np.zeros((2, 1)), 3, np.random.default_rng(0))


def test_kmeans_reordering_invariance():
    tensor, _ = generate(preset("sim3", n=60, seed=4))
    perm = np.random.default_rng(5).permutation(60)
    a = kmeans_init(tensor, 3, InitSpec("kmeans", 3, 11))
    b = kmeans_init(tensor.subset(perm), 3, InitSpec("kmeans", 3, 11))
    np.testing.assert_array_equal(a[perm], b)


def test_kmeans_picks_smallest_wcss():
    tensor, _ = generate(preset("sim2", n=80, seed=6))
    cands = kmeans_candidates(tensor, 3, 5, 2)
    best = min(range(5), key=lambda i: (cands[i][1], i))
    np.testing.assert_array_equal(kmeans_init(tensor, 3, InitSpec("kmeans", 5, 2)), cands[best][0])


def test_random_init_examples():
    rng = np.random.default_rng(7)
    np.testing.assert_array_equal(random_init(5, 1, rng), np.ones((5, 1)))
    z = random_init(20_000, 3, rng)
    assert np.all(np.abs(z.sum(axis=1) - 1) < 1e-12) and np.all(z >= 0)
    # each coordinate of a uniform simplex point has mean 1/G and variance (G-1)/(G^2 (G+1))
    se = math.sqrt(2 / (9 * 4) / 20_000)
    assert np.all(np.abs(z.mean(axis=0) - 1 / 3) < 3 * se)


def test_init_params_examples():
    tensor = CountTensor(np.array([[[7, 0]], [[7, 0]], [[7, 0]]]))
    (c,) = init_params(tensor, np.zeros(3, dtype=int), 1)
    assert c.M[0, 0] == pytest.approx(math.log(7))
    assert c.M[0, 1] == pytest.approx(math.log(0.5))
    np.testing.assert_array_equal(c.Phi, np.eye(1))
    np.testing.assert_array_equal(c.Omega, np.eye(2))


def test_init_params_library_sizes():
    tensor = CountTensor(np.array([[[8, 2]], [[4, 6]]]))
    (c,) = init_params(tensor, np.zeros(2, dtype=int), 1, s=np.array([2.0, 0.5]))
    np.testing.assert_allclose(c.M, np.log([[3.0, 8.0]]))


@given(st.integers(0, 2**31))
@settings(max_examples=20)
def test_init_params_always_finite(seed):
    rng = np.random.default_rng(seed)
    tensor = CountTensor(rng.poisson(rng.choice([0.0, 0.1, 50.0], size=(12, 2, 2))))
    z = random_init(12, 2, rng) * 0.5 + np.repeat([[1.0, 0.0], [0.0, 1.0]], 6, axis=0) * 0.5
    for c in init_params(tensor, z, 2):
        assert np.all(np.isfinite(c.M))


def test_init_params_empty_cluster():
    tensor = CountTensor(np.ones((3, 1, 1), dtype=int))
    with pytest.raises(DegenerateComponentError):
        init_params(tensor, np.zeros(3, dtype=int), 2)


def test_best_of_runs_examples():
    assert best_of_runs(["a"], lambda c: -5.0)[0] == 0
    scores = {"a": -100.0, "b": -90.0, "c": -95.0}
    assert best_of_runs(list(scores), scores.get)[0] == 1
    assert best_of_runs(["x", "y"], lambda c: 1.0)[0] == 0
    with pytest.raises(ValueError):
        best_of_runs([], lambda c: 0.0)


def test_initialize_records_scores():
    tensor, _ = generate(preset("sim3", n=50, seed=8))
    z, comps, info = initialize(tensor, None, 2, InitSpec("random", 4, 3))
    assert len(info["scores"]) == 4 and info["chosen"] == int(np.argmax(info["scores"]))
    assert len(comps) == 2 and z.shape == (50, 2)


def test_init_spec_validation():
    with pytest.raises(ValueError):
        InitSpec("kmeans", 0)
    with pytest.raises(ValueError):
        InitSpec("spectral")
