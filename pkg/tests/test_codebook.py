import numpy as np
import pytest

from slamrecog.codebook import Vocabulary, assign, assign_many, fit_kmeans, objective


def mixture(rng, n=1000, d=8, k=5):
    means = rng.normal(0, 5, (k, d))
    lab = rng.integers(0, k, n)
    return means[lab] + rng.normal(size=(n, d))


def test_n_equals_k_recovers_points(rng):
    X = rng.normal(size=(6, 3))
    v = fit_kmeans(X, 6, seed=0)
    assert v.objective == 0.0
    assert sorted(map(tuple, v.centers)) == sorted(map(tuple, X))


def test_identical_points_are_degenerate():
    with pytest.raises(ValueError, match="degenerate data"):
        fit_kmeans(np.ones((50, 4)), 3)


def test_too_few_samples(rng):
    with pytest.raises(ValueError):
        fit_kmeans(rng.normal(size=(3, 2)), 4)


def test_objective_history_non_increasing_and_recomputed(rng):
    X = mixture(rng)
    v = fit_kmeans(X, 8, seed=3)
    h = np.array(v.history)
    assert np.all(np.diff(h) <= 1e-9 * h[0])
    assert h[-1] <= h[0]
    # final objective recomputed from scratch
    assert v.objective == pytest.approx(objective(X, v.centers), rel=1e-12)
    assert v.iterations == len(h) - 1


def test_per_iteration_objective_from_scratch(rng):
    X = mixture(rng)
    prev = None
    for it in range(1, 8):
        v = fit_kmeans(X, 8, seed=3, max_iter=it, tol=0.0)
        obj = objective(X, v.centers)
        if prev is not None:
            assert obj <= prev * (1 + 1e-12)
        prev = obj


def test_same_seed_bit_identical(rng):
    X = mixture(rng)
    a, b = fit_kmeans(X, 8, seed=1), fit_kmeans(X, 8, seed=1)
    assert np.array_equal(a.centers, b.centers) and a.history == b.history


def test_empty_cluster_reseeded(rng):
    # a far outlier plus a tight blob: every centre must end up owning points
    X = np.vstack([rng.normal(size=(200, 2)) * 0.01, [[100.0, 100.0]]])
    v = fit_kmeans(X, 4, seed=0)
    counts = np.bincount(assign_many(v.centers, X), minlength=4)
    assert np.all(counts > 0)
    assert len(np.unique(v.centers, axis=0)) == 4


def test_assign_examples(rng):
    C = rng.normal(size=(6, 4))
    v = Vocabulary(C)
    assert assign(v, C[3]) == 3
    tie = Vocabulary(np.array([[5.0, 5.0], [-1.0, 0.0], [1.0, 0.0]]))
    assert assign(tie, [0.0, 0.0]) == 1
    assert assign_many(tie.centers, np.zeros((1, 2)))[0] == 1


def test_assign_dimension_mismatch(rng):
    v = Vocabulary(rng.normal(size=(3, 4)))
    with pytest.raises(ValueError, match="dimension mismatch"):
        assign(v, np.zeros(5))
    with pytest.raises(ValueError):
        assign_many(v.centers, np.zeros((2, 5)))


def test_assign_many_matches_exhaustive_scan(rng):
    C = rng.normal(size=(64, 80))
    X = rng.normal(size=(10000, 80))
    X[:50] = C[rng.integers(0, 64, 50)]
    brute = np.array([np.argmin(((C - x) ** 2).sum(1)) for x in X])
    assert np.array_equal(assign_many(C, X), brute)
    lab, d = assign_many(C, X, return_dist=True)
    full = ((X[:, None, :] - C[None]) ** 2).sum(-1)
    assert np.all(d <= full.min(1) + 1e-9)


def test_vocabulary_rejects_duplicates():
    with pytest.raises(ValueError):
        Vocabulary(np.zeros((2, 3)))


def test_vocabulary_container_meta(rng):
    v = fit_kmeans(mixture(rng), 5, seed=2)
    c = v.to_container()
    assert c.meta["seed"] == 2 and c.meta["k"] == 5
    back = Vocabulary.from_container(c)
    assert back.history == v.history and back.iterations == v.iterations
