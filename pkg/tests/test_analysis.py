import numpy as np
import pytest
from scipy.stats import ortho_group

from hubertlab.analysis import (LinearProbe, agwe_table, layerwise_probe, layerwise_report, linear_probe,
                                pool_words, pwcca, pwcca_details, reference_matrix)
from hubertlab.corpus import Lexicon, Utterance
from hubertlab.errors import ConfigError, ShapeError

from oracles import pwcca_textbook


def _correlated(rng, n=2000, dx=10, dy=8, strength=0.5):
    Z = rng.normal(size=(n, 4))
    X = rng.normal(size=(n, dx)) + strength * Z @ rng.normal(size=(4, dx))
    Y = rng.normal(size=(n, dy)) + strength * Z @ rng.normal(size=(4, dy))
    return X, Y


def test_self_similarity_is_one():
    X = np.random.default_rng(0).normal(size=(300, 7))
    assert abs(pwcca(X, X) - 1.0) < 1e-6


def test_orthogonal_transform_invariance():
    rng = np.random.default_rng(1)
    X, Y = _correlated(rng)
    Q = ortho_group.rvs(Y.shape[1], random_state=2)
    assert abs(pwcca(X, Y @ Q) - pwcca(X, Y)) < 1e-6
    assert abs(pwcca(X, X @ ortho_group.rvs(10, random_state=3)) - 1.0) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_invertible_affine_invariance(seed):
    rng = np.random.default_rng(seed)
    X, Y = _correlated(rng)
    A = rng.normal(size=(8, 8)) + 3 * np.eye(8)
    shifted = Y @ A + rng.normal(size=8)
    # the view keeps every component, so only the correlations can change it
    assert abs(pwcca(X, shifted, variance=1.0) - pwcca(X, Y, variance=1.0)) < 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_matches_textbook_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    if seed % 2:
        X, Y = rng.normal(size=(2000, 10)), rng.normal(size=(2000, 10))
    else:
        X, Y = _correlated(rng, n=int(rng.integers(200, 800)))
    assert abs(pwcca(X, Y) - pwcca_textbook(X, Y)) < 1e-6


def test_independent_views_score_low():
    rng = np.random.default_rng(7)
    assert pwcca(rng.normal(size=(2000, 10)), rng.normal(size=(2000, 10))) < 0.15


@pytest.mark.parametrize("seed", range(10))
def test_truncation_does_not_inflate(seed):
    X, Y = _correlated(np.random.default_rng(seed), n=600, strength=1.0)
    full = pwcca(X, Y, variance=1.0)
    assert pwcca(X, Y) <= full + 1e-3
    r = pwcca_details(X, Y)
    assert abs(r.weights.sum() - 1) < 1e-12 and np.all((r.correlations >= 0) & (r.correlations <= 1))


def test_too_few_items_is_error():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError, match="subsample"):
        pwcca(rng.normal(size=(5, 8)), rng.normal(size=(5, 3)))
    with pytest.raises(ShapeError):
        pwcca(np.zeros((10, 2)), np.zeros((11, 2)))


# ---------------------------------------------------------------- pooling

def _utt(n_samples, word_spans):
    return Utterance("u", np.zeros(n_samples), 16000, word_spans=tuple(word_spans))


def test_single_word_pools_all_frames():
    H = np.random.default_rng(0).normal(size=(10, 3))
    wp = pool_words(H, _utt(400 + 9 * 160, [(4, 0, 400 + 9 * 160)]))
    np.testing.assert_allclose(wp.rows, H.mean(0, keepdims=True))
    assert wp.word_ids.tolist() == [4] and wp.n_dropped == 0


def test_span_shorter_than_hop_dropped():
    H = np.ones((10, 2))
    # frame centers at 200, 360, 520, ...; [210, 300) holds none of them
    wp = pool_words(H, _utt(2000, [(0, 0, 210), (1, 210, 300), (2, 300, 2000)]))
    assert wp.n_dropped == 1 and wp.word_ids.tolist() == [0, 2]


def test_pooling_matches_membership_scan(small_corpus, small_features):
    rng = np.random.default_rng(3)
    for u, f in zip(small_corpus[2], small_features):
        H = rng.normal(size=(f.n_frames, 5))
        wp = pool_words(H, u)
        want = []
        for _, s, e in u.word_spans:
            members = [t for t in range(f.n_frames) if s <= t * 160 + 200 < e]
            if members:
                want.append(sum(H[t] for t in members) / len(members))
        np.testing.assert_allclose(wp.rows, np.array(want).reshape(-1, 5), atol=1e-7)


# ---------------------------------------------------------------- references

def test_reference_kinds():
    lex = Lexicon(((0, 1), (2, 3), (0, 1, 1)))
    wo = reference_matrix("word-onehot", [1, 0, 1], lexicon=lex)
    assert wo.shape == (3, 3) and np.array_equal(wo[0], wo[2])
    ag = reference_matrix("agwe-standin", [0, 1, 2], lexicon=lex, n_phones=4)
    assert abs(ag[0] @ ag[1]) < 1e-15 and ag[0] @ ag[2] > 0
    np.testing.assert_allclose(np.linalg.norm(agwe_table(lex, 4), axis=1), 1.0)
    gl = reference_matrix("glove-standin", [2, 2, 0], lexicon=lex)
    assert gl.shape == (3, 16) and np.array_equal(gl[0], gl[1])
    np.testing.assert_array_equal(gl, reference_matrix("glove-standin", [2, 2, 0], lexicon=lex))
    ph = reference_matrix("phone-onehot", [3, 0], n_phones=5)
    assert ph.shape == (2, 5) and ph[0, 3] == 1
    with pytest.raises(ShapeError):
        reference_matrix("layer0", [0, 1], layer0=np.zeros((3, 2)))
    with pytest.raises(ConfigError):
        reference_matrix("bert", [0])


def test_layerwise_report(small_corpus, small_features, tiny_encoder, tiny_params):
    inv, lex, utts = small_corpus
    kinds = ("word-onehot", "phone-onehot", "agwe-standin", "glove-standin", "layer0")
    rep = layerwise_report(tiny_params, tiny_encoder, utts, small_features, kinds, lexicon=lex,
                           n_phones=inv.n_phones, tag="a")
    assert sorted(rep.scores) == [0, 1, 2]
    assert abs(rep.scores[0]["layer0"] - 1.0) < 1e-6
    for layer in rep.scores.values():
        for kind in kinds:
            s = layer[kind]
            assert s is None or 0.0 <= s <= 1 + 1e-6
    again = layerwise_report(tiny_params, tiny_encoder, utts, small_features, kinds, lexicon=lex,
                             n_phones=inv.n_phones, tag="b")
    assert [(r["layer"], r["reference"], r["score"]) for r in rep.rows()] == \
        [(r["layer"], r["reference"], r["score"]) for r in again.rows()]
    assert set(next(rep.rows())) == {"checkpoint", "iteration", "step", "layer", "reference", "score"}
    assert rep.best_layer("word-onehot") in (0, 1, 2)


def test_report_cell_failure_is_isolated(small_corpus, small_features, tiny_encoder, tiny_params):
    inv, lex, utts = small_corpus
    # two word tokens cannot support a 10-dimensional one-hot view
    rep = layerwise_report(tiny_params, tiny_encoder, utts, small_features, ("word-onehot", "phone-onehot"),
                           lexicon=lex, n_phones=inv.n_phones, cap=2)
    assert rep.scores[0]["word-onehot"] is None and (0, "word-onehot") in rep.errors


# ---------------------------------------------------------------- probes

def test_probe_separable():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(-3, 1, (40, 2)), rng.normal(3, 1, (40, 2))])
    y = np.repeat([0, 1], 40)
    idx = rng.permutation(80)
    assert linear_probe(X[idx[:60]], y[idx[:60]], X[idx[60:]], y[idx[60:]]) == 1.0


def test_probe_shuffled_labels_near_chance():
    rng = np.random.default_rng(1)
    C, n = 4, 4000
    X = rng.normal(size=(n, 6))
    y = rng.integers(0, C, n)
    acc = linear_probe(X[:2000], y[:2000], X[2000:], rng.permutation(y[2000:]))
    sigma = np.sqrt(0.25 * 0.75 / 2000)
    assert abs(acc - 1 / C) < 3 * sigma


def test_probe_rejects_single_class():
    with pytest.raises(ConfigError):
        LinearProbe().fit(np.zeros((4, 2)), [1, 1, 1, 1])


def test_layerwise_probe_smoke(small_corpus, small_features, tiny_encoder, tiny_params):
    labels = [u.label for u in small_corpus[2]]
    out = layerwise_probe(tiny_params, tiny_encoder, small_features, labels, np.arange(8), np.arange(8, 12),
                          epochs=20)
    assert sorted(out) == [0, 1, 2] and all(0.0 <= a <= 1.0 for a in out.values())
