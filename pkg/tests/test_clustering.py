import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hubertlab import clustering
from hubertlab.clustering import (Codebook, StreamingKMeans, assign, dead_cluster_repair, inertia,
                                  init_codebook, iter_minibatches, nearest, partial_fit)
from hubertlab.errors import ConfigError, ShapeError
from hubertlab.features import FeatureSequence

from oracles import blobs, inertia_oracle, lloyd


# ---------------------------------------------------------------- seeding

def test_k_equals_rows_is_permutation():
    X = np.random.default_rng(1).normal(size=(9, 3))
    cb = init_codebook(9, X, seed=4)
    assert sorted(map(tuple, cb.centroids)) == sorted(map(tuple, X))
    assert np.all(cb.counts == 0)


def test_k1_uniform_first_pick():
    X = np.arange(10, dtype=float)[:, None]
    picks = [init_codebook(1, X, seed=s).centroids[0, 0] for s in range(3000)]
    freq = np.bincount(np.array(picks, dtype=int), minlength=10) / 3000
    assert np.all(np.abs(freq - 0.1) < 4 * np.sqrt(0.1 * 0.9 / 3000))


def test_kmeanspp_matches_enumeration_oracle():
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(0, 0.05, (4, 2)), rng.normal(5, 0.05, (4, 2))])
    n = len(X)
    # exact distribution over ordered (first, second) picks
    prob = {}
    for i in range(n):
        d2 = ((X - X[i]) ** 2).sum(1)
        for j in range(n):
            prob[(i, j)] = (1 / n) * d2[j] / d2.sum()
    cross = sum(p for (i, j), p in prob.items() if (i < 4) != (j < 4))
    assert cross > 0.99
    trials = 4000
    counts = {}
    for s in range(trials):
        c = init_codebook(2, X, seed=s).centroids
        key = tuple(int(np.flatnonzero((X == row).all(1))[0]) for row in c)
        counts[key] = counts.get(key, 0) + 1
    assert set(counts) <= {k for k, p in prob.items() if p > 0}
    for key, p in prob.items():
        f = counts.get(key, 0) / trials
        assert abs(f - p) < 4 * np.sqrt(p * (1 - p) / trials) + 1e-3


def test_seeding_errors_and_determinism():
    X = np.random.default_rng(1).normal(size=(5, 2))
    with pytest.raises(ConfigError):
        init_codebook(6, X)
    np.testing.assert_array_equal(init_codebook(3, X, seed=2).centroids, init_codebook(3, X, seed=2).centroids)


def test_seeding_with_duplicate_rows():
    X = np.zeros((4, 2))
    cb = init_codebook(3, X, seed=0)
    assert cb.k == 3 and np.all(cb.centroids == 0)


# ---------------------------------------------------------------- updates

def test_fixed_point_batch():
    cb = Codebook(np.array([[0.0, 0.0], [3.0, 4.0]]), np.array([5.0, 2.0]))
    partial_fit(cb, np.tile([3.0, 4.0], (7, 1)))
    np.testing.assert_array_equal(cb.centroids[1], [3.0, 4.0])
    assert cb.counts.tolist() == [5.0, 9.0]


def test_fresh_centroid_absorbs_first_frame():
    cb = Codebook(np.array([[0.0, 0.0], [10.0, 10.0]]), np.zeros(2))
    partial_fit(cb, np.array([[9.0, 11.5]]))
    np.testing.assert_array_equal(cb.centroids[1], [9.0, 11.5])
    np.testing.assert_array_equal(cb.centroids[0], [0.0, 0.0])


def test_streaming_mean_equals_sequential_update():
    rng = np.random.default_rng(3)
    cb = Codebook(np.array([[0.0], [100.0]]), np.array([2.0, 0.0]))
    x = rng.normal(0, 1, (6, 1))
    # reference: one frame at a time, count incremented first
    c, n = 0.0, 2
    for v in x[:, 0]:
        n += 1
        c += (v - c) / n
    partial_fit(cb, x)
    assert cb.centroids[0, 0] == pytest.approx(c, abs=1e-12)


def test_dimension_mismatch():
    cb = Codebook(np.zeros((2, 3)), np.zeros(2))
    with pytest.raises(ShapeError):
        partial_fit(cb, np.zeros((4, 2)))


def test_streaming_matches_lloyd_means_onblobs():
    X, y = blobs(7, n_per=67)
    X = X[:200]
    km = StreamingKMeans(3, batch_size=50, n_passes=10, init_size=200, random_state=0).fit(X)
    truth = np.array([X[y[:200] == j].mean(0) for j in range(3)])
    oracle = lloyd(X, truth)
    got = km.cluster_centers_[np.argsort([np.argmin(((oracle - c) ** 2).sum(1)) for c in km.cluster_centers_])]
    assert np.all(np.linalg.norm(got - oracle, axis=1) <= 0.05 * np.linalg.norm(oracle, axis=1) + 0.05)


@pytest.mark.parametrize("seed", range(5))
def test_repeated_partial_fit_reaches_lloyd_inertia(seed):
    X, _ = blobs(seed, n_per=16, centers=((0, 0), (8, 1), (2, 9), (9, 9)))
    cb = init_codebook(4, X, seed=seed)
    fixed = lloyd(X, cb.centroids)
    for _ in range(3000):
        partial_fit(cb, X)
    ref = inertia_oracle(X, fixed)
    assert abs(inertia(cb, X) - ref) <= 1e-6 * max(1.0, ref)


# ---------------------------------------------------------------- assignment

def test_assign_exact_and_ties():
    cb = Codebook(np.array([[1.0, 0.0], [5.0, 5.0], [9.0, 9.0], [-1.0, 0.0]]), np.zeros(4))
    assert assign(cb, np.array([[5.0, 5.0]])).tolist() == [1]
    assert assign(cb, np.array([[0.0, 0.0]])).tolist() == [0]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(1, 8), st.integers(1, 6), st.integers(0, 2**31))
def test_assign_matches_brute_force(T, K, D, seed):
    rng = np.random.default_rng(seed)
    C = rng.integers(-3, 4, (K, D)).astype(float)  # small integers provoke ties
    F = rng.integers(-3, 4, (T, D)).astype(float)
    want = []
    for f in F:
        best, arg = None, None
        for j, c in enumerate(C):
            d = sum((a - b) ** 2 for a, b in zip(f, c))
            if best is None or d < best:
                best, arg = d, j
        want.append(arg)
    got = assign(Codebook(C, np.zeros(K)), F)
    assert got.tolist() == want
    assert np.all((got >= 0) & (got < K))


def test_assign_kind_check():
    cb = Codebook(np.zeros((2, 3)), np.zeros(2), kind="layer:3")
    with pytest.raises(ShapeError):
        assign(cb, FeatureSequence("u", np.zeros((4, 3)), kind="mfcc"))
    assert assign(cb, FeatureSequence("u", np.zeros((4, 3)), kind="layer:3")).shape == (4,)


def test_blocked_distances_match_direct(monkeypatch):
    monkeypatch.setattr(clustering, "_BLOCK_ELEMENTS", 17)
    rng = np.random.default_rng(0)
    F, C = rng.normal(size=(23, 4)), rng.normal(size=(5, 4))
    lab, d = nearest(F, C)
    full = ((F[:, None] - C[None]) ** 2).sum(-1)
    np.testing.assert_array_equal(lab, full.argmin(1))
    np.testing.assert_allclose(d, full.min(1), rtol=1e-12)


# ---------------------------------------------------------------- repair

def test_repair_no_dead_is_noop():
    cb = Codebook(np.array([[0.0], [5.0]]), np.array([3.0, 3.0]))
    partial_fit(cb, np.array([[0.1], [5.1]]))
    before = cb.centroids.copy()
    dead_cluster_repair(cb, np.array([[100.0]]), threshold=1)
    np.testing.assert_array_equal(cb.centroids, before)


def test_repair_relocates_dead_and_resets_count():
    cb = Codebook(np.array([[0.0], [1000.0]]), np.array([3.0, 7.0]))
    partial_fit(cb, np.array([[0.0], [1.0], [9.0]]))
    dead_cluster_repair(cb, np.array([[0.0], [1.0], [9.0]]), threshold=1)
    assert cb.centroids[1, 0] == 9.0 and cb.counts[1] == 0
    assert np.all(cb.recent == 0)


def test_repair_lowers_inertia_paired_run():
    X, _ = blobs(2, n_per=30)
    init = np.array([[0.0, 0.0], [5.0, 5.0], [500.0, 500.0]])  # third centroid is unreachable
    runs = {}
    for repair in (False, True):
        cb = Codebook(init.copy(), np.zeros(3))
        for p in range(6):
            for batch in iter_minibatches([X], 30, seed=[p]):
                partial_fit(cb, batch)
            if repair and p == 0:
                dead_cluster_repair(cb, X, threshold=1)
        runs[repair] = inertia(cb, X)
    assert runs[True] < runs[False]


# ---------------------------------------------------------------- memory and estimator

def test_memory_is_bounded_by_codebook_and_batch(monkeypatch):
    K, D, B = 50, 16, 256
    seen = []
    real = clustering.squared_distances

    def spy(frames, centroids):
        seen.append(frames.shape[0] * centroids.shape[0] * centroids.shape[1])
        return real(frames, centroids)

    monkeypatch.setattr(clustering, "squared_distances", spy)
    rng = np.random.default_rng(0)
    cb = init_codebook(K, rng.normal(size=(K, D)), seed=0)
    # the only persistent state is K x D centroids plus two K-vectors
    state = [v for v in vars(cb).values() if isinstance(v, np.ndarray)]
    assert sum(a.size for a in state) == K * D + 2 * K
    batch = rng.normal(size=(B, D))
    seen.clear()
    tracemalloc.start()
    partial_fit(cb, batch)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    assert max(seen) <= clustering._BLOCK_ELEMENTS
    assert peak <= 8 * (4 * (K * D + B * D) + 2 * clustering._BLOCK_ELEMENTS)


def test_fitted_estimator_keeps_no_data():
    X, _ = blobs(0, n_per=200)
    km = StreamingKMeans(3, batch_size=64, n_passes=2, init_size=128).fit(X)
    for v in vars(km).values():
        if isinstance(v, np.ndarray):
            assert v.shape[0] <= 3


def test_minibatches_cover_everything_once():
    seqs = [np.arange(n, dtype=float)[:, None] + 100 * i for i, n in enumerate([5, 17, 3, 9])]
    batches = list(iter_minibatches(seqs, 6, seed=3))
    assert all(b.shape[0] <= 6 for b in batches)
    got = np.sort(np.concatenate(batches)[:, 0])
    np.testing.assert_array_equal(got, np.sort(np.concatenate(seqs)[:, 0]))


def test_estimator_api_and_persistence(tmp_path):
    X, _ = blobs(1, n_per=40)
    km = StreamingKMeans(3, batch_size=32, n_passes=3, init_size=64, random_state=2).fit(X)
    assert km.get_params()["n_clusters"] == 3
    assert km.predict(X).max() < 3
    assert km.transform(X).shape == (120, 3)
    assert km.score(X) == pytest.approx(-inertia(km.codebook_, X))
    km.codebook_.save(tmp_path / "cb.tnsr")
    back = Codebook.load(tmp_path / "cb.tnsr")
    assert back.kind == "mfcc" and back.k == 3
    np.testing.assert_allclose(back.centroids, km.cluster_centers_, rtol=1e-6)
    np.testing.assert_array_equal(back.counts, km.counts_)
    again = StreamingKMeans(3, batch_size=32, n_passes=3, init_size=64, random_state=2).fit(X)
    np.testing.assert_array_equal(again.cluster_centers_, km.cluster_centers_)


def test_estimator_partial_fit_path():
    X, _ = blobs(4, n_per=10)
    km = StreamingKMeans(3, random_state=0)
    for _ in range(3):
        km.partial_fit(X)
    assert km.counts_.sum() == 90
