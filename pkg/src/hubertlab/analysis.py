"""Layerwise representation analysis: projection-weighted CCA and linear probes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted, check_X_y

from .encoder import forward
from .errors import ConfigError, ShapeError
from .features import frame_labels

REFERENCE_KINDS = ("word-onehot", "phone-onehot", "glove-standin", "agwe-standin", "layer0")
GLOVE_DIM = 16


def _truncate(X, variance):
    """Principal-component scores keeping the fewest components reaching ``variance``."""
    U, s, _ = np.linalg.svd(X, full_matrices=False)
    energy = s * s
    total = energy.sum()
    if total <= 0:
        raise ShapeError("pwcca: view has zero variance")
    if variance >= 1.0:
        keep = int(np.sum(s > s[0] * 1e-10))
    else:
        keep = int(np.searchsorted(np.cumsum(energy) / total, variance) + 1)
    keep = min(keep, s.size)
    return U[:, :keep] * s[:keep]


def _inv_sqrt(C):
    w, V = np.linalg.eigh(C)
    return (V / np.sqrt(w)) @ V.T


@dataclass
class CCAResult:
    correlations: np.ndarray
    weights: np.ndarray
    score: float


def pwcca_details(X, Y, variance: float = 0.99, epsilon: float = 1e-8) -> CCAResult:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeError(f"pwcca: views must be 2-D with equal rows, got {X.shape} and {Y.shape}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ShapeError("pwcca: non-finite entries")
    n = X.shape[0]
    Xc = X - X.mean(0)
    Yc = Y - Y.mean(0)
    Xr = _truncate(Xc, variance)
    Yr = _truncate(Yc, variance)
    # centered data has n - 1 degrees of freedom; a view filling them all correlates perfectly with anything
    if n - 1 <= max(Xr.shape[1], Yr.shape[1]):
        raise ShapeError(
            f"pwcca: {n} items but {max(Xr.shape[1], Yr.shape[1])} retained dimensions; "
            "subsample fewer dimensions or collect more items"
        )
    Cxx = Xr.T @ Xr / (n - 1) + epsilon * np.eye(Xr.shape[1])
    Cyy = Yr.T @ Yr / (n - 1) + epsilon * np.eye(Yr.shape[1])
    Cxy = Xr.T @ Yr / (n - 1)
    Wx = _inv_sqrt(Cxx)
    Wy = _inv_sqrt(Cyy)
    U, rho, _ = np.linalg.svd(Wx @ Cxy @ Wy, full_matrices=False)
    m = rho.size
    rho = np.clip(rho, 0.0, 1.0)
    # canonical variates of X over the items, unit length
    H = Xr @ (Wx @ U[:, :m])
    H /= np.linalg.norm(H, axis=0, keepdims=True)
    alpha = np.abs(H.T @ Xc).sum(1)
    alpha /= alpha.sum()
    return CCAResult(rho, alpha, float(alpha @ rho))


def pwcca(X, Y, variance: float = 0.99, epsilon: float = 1e-8) -> float:
    """Projection-weighted CCA similarity; ``X`` is the analysed (model) view.

    Columns are centered, each view is reduced to the principal components
    explaining ``variance`` of its total variance, and the canonical
    correlations are weighted by how strongly each X-side canonical variate
    projects onto X's original dimensions.
    """
    return pwcca_details(X, Y, variance, epsilon).score


# ---------------------------------------------------------------- pooling / references

@dataclass
class WordPool:
    rows: np.ndarray
    word_ids: np.ndarray
    n_dropped: int = 0
    utterance_index: np.ndarray = field(default=None)


def pool_words(hidden, utterance, frame_hop: float = 0.010, frame_len: float = 0.025) -> WordPool:
    """Mean of the frames whose centers fall inside each word span; empty spans are dropped."""
    H = np.asarray(getattr(hidden, "frames", hidden), dtype=np.float64)
    sr = utterance.sample_rate
    hop = int(round(frame_hop * sr))
    win = int(round(frame_len * sr))
    centers = np.arange(H.shape[0]) * hop + win // 2
    rows, ids, dropped = [], [], 0
    for w, start, end in utterance.word_spans:
        lo = np.searchsorted(centers, start, side="left")
        hi = np.searchsorted(centers, end, side="left")
        if hi <= lo:
            dropped += 1
            continue
        rows.append(H[lo:hi].mean(0))
        ids.append(w)
    rows = np.array(rows).reshape(len(rows), H.shape[1])
    return WordPool(rows, np.asarray(ids, dtype=np.int64), dropped)


def agwe_table(lexicon, n_phones: int) -> np.ndarray:
    """Bag-of-phones count vector per word, L2-normalized."""
    T = np.zeros((lexicon.vocab_size, n_phones))
    for w, phones in enumerate(lexicon.words):
        for p in phones:
            T[w, p] += 1.0
    return T / np.linalg.norm(T, axis=1, keepdims=True)


def glove_table(vocab_size: int, seed: int = 0, dim: int = GLOVE_DIM) -> np.ndarray:
    return np.random.default_rng([seed, 404]).normal(size=(vocab_size, dim))


def reference_matrix(kind: str, items, lexicon=None, n_phones: int | None = None,
                     seed: int = 0, layer0=None) -> np.ndarray:
    """Reference view aligned row-for-row with ``items``.

    ``items`` are word ids (word-level kinds), phone ids (``phone-onehot``),
    or for ``layer0`` the pooled layer-0 rows, passed via ``layer0``.
    """
    items = np.asarray(items)
    if kind == "word-onehot":
        V = lexicon.vocab_size if lexicon is not None else int(items.max()) + 1
        return np.eye(V)[items.astype(np.int64)]
    if kind == "phone-onehot":
        P = n_phones if n_phones is not None else int(items.max()) + 1
        return np.eye(P)[items.astype(np.int64)]
    if kind == "glove-standin":
        V = lexicon.vocab_size if lexicon is not None else int(items.max()) + 1
        return glove_table(V, seed)[items.astype(np.int64)]
    if kind == "agwe-standin":
        if lexicon is None:
            raise ConfigError("agwe-standin needs the lexicon")
        P = n_phones if n_phones is not None else 1 + max(max(w) for w in lexicon.words)
        return agwe_table(lexicon, P)[items.astype(np.int64)]
    if kind == "layer0":
        if layer0 is None:
            raise ConfigError("layer0 reference needs the pooled layer-0 rows")
        layer0 = np.asarray(layer0)
        if layer0.shape[0] != items.shape[0]:
            raise ShapeError(f"layer0 reference has {layer0.shape[0]} rows for {items.shape[0]} items")
        return layer0
    raise ConfigError(f"unknown reference kind {kind!r}; choose from {', '.join(REFERENCE_KINDS)}")


# ---------------------------------------------------------------- reports

@dataclass
class SimilarityReport:
    tag: str
    iteration: int
    step: int
    scores: dict  # layer -> {kind: score or None}
    errors: dict = field(default_factory=dict)

    def best_layer(self, kind: str):
        vals = [(s[kind], l) for l, s in self.scores.items() if s.get(kind) is not None]
        return max(vals)[1] if vals else None

    def rows(self):
        for layer in sorted(self.scores):
            for kind, score in self.scores[layer].items():
                yield {"checkpoint": self.tag, "iteration": self.iteration, "step": self.step,
                       "layer": layer, "reference": kind, "score": score}


def hidden_states(params, config, features, compute_dtype="float32"):
    """Per utterance, the list H_0..H_L from an unmasked eval-mode forward."""
    pc = {k: v.astype(compute_dtype) for k, v in params.items()}
    return [[h.astype(np.float64) for h in forward(pc, config, f, n_layers=config.n_layers).hidden_states]
            for f in features]


def layerwise_report(params, config, utterances, features, kinds=("word-onehot",), lexicon=None,
                     n_phones=None, cap: int = 5000, seed: int = 0, tag: str = "",
                     iteration: int = 0, step: int = 0) -> SimilarityReport:
    """PWCCA of every layer against every requested reference.

    Word tokens (and frames, for ``phone-onehot``) are subsampled to ``cap``
    with a fixed seed. A cell whose computation fails is left ``None`` and
    its error recorded.
    """
    for k in kinds:
        if k not in REFERENCE_KINDS:
            raise ConfigError(f"unknown reference kind {k!r}")
    hs = hidden_states(params, config, features)
    L = config.n_layers
    rng = np.random.default_rng([seed, 505])
    pooled = {l: [] for l in range(L + 1)}
    word_ids = []
    for utt, feat, H in zip(utterances, features, hs):
        ids = None
        for l in range(L + 1):
            wp = pool_words(H[l], utt, feat.frame_hop, feat.frame_len)
            pooled[l].append(wp.rows)
            ids = wp.word_ids
        word_ids.append(ids)
    word_ids = np.concatenate(word_ids) if word_ids else np.empty(0, dtype=np.int64)
    pick = np.sort(rng.permutation(word_ids.size)[:cap])
    word_rows = {l: np.concatenate(pooled[l])[pick] for l in pooled}
    word_ids = word_ids[pick]

    frame_rows = frame_phones = None
    if "phone-onehot" in kinds:
        labs = [frame_labels(u, f, "phone") for u, f in zip(utterances, features)]
        allp = np.concatenate(labs)
        keep = np.flatnonzero(allp >= 0)
        fpick = np.sort(rng.permutation(keep)[:cap])
        frame_phones = allp[fpick]
        frame_rows = {l: np.concatenate([H[l] for H in hs])[fpick] for l in range(L + 1)}

    scores, errors = {}, {}
    for l in range(L + 1):
        scores[l] = {}
        for kind in kinds:
            try:
                if kind == "phone-onehot":
                    Y = reference_matrix(kind, frame_phones, n_phones=n_phones)
                    X = frame_rows[l]
                else:
                    Y = reference_matrix(kind, word_ids, lexicon=lexicon, n_phones=n_phones, seed=seed,
                                         layer0=word_rows[0] if kind == "layer0" else None)
                    X = word_rows[l]
                scores[l][kind] = pwcca(X, Y)
            except (ShapeError, ConfigError, np.linalg.LinAlgError) as exc:
                scores[l][kind] = None
                errors[(l, kind)] = str(exc)
    return SimilarityReport(tag, iteration, step, scores, errors)


# ---------------------------------------------------------------- probes

class LinearProbe(BaseEstimator, ClassifierMixin):
    """Multinomial logistic regression trained by full-batch gradient descent.

    Features are standardized with training statistics.
    """

    def __init__(self, epochs=300, lr=0.5, l2=1e-4, standardize=True):
        self.epochs = epochs
        self.lr = lr
        self.l2 = l2
        self.standardize = standardize

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_, yi = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ConfigError("linear probe: training set has a single class")
        self.mean_ = X.mean(0) if self.standardize else np.zeros(X.shape[1])
        sd = X.std(0) if self.standardize else np.ones(X.shape[1])
        self.scale_ = np.where(sd > 1e-12, sd, 1.0)
        Z = (X - self.mean_) / self.scale_
        n, C = Z.shape[0], self.classes_.size
        Y = np.eye(C)[yi]
        W = np.zeros((Z.shape[1], C))
        b = np.zeros(C)
        for _ in range(self.epochs):
            logits = Z @ W + b
            logits -= logits.max(1, keepdims=True)
            P = np.exp(logits)
            P /= P.sum(1, keepdims=True)
            G = (P - Y) / n
            W -= self.lr * (Z.T @ G + self.l2 * W)
            b -= self.lr * G.sum(0)
        self.coef_, self.intercept_ = W, b
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = np.asarray(X, dtype=np.float64)
        return ((X - self.mean_) / self.scale_) @ self.coef_ + self.intercept_

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(1)]


def linear_probe(train_X, train_y, test_X, test_y, n_classes=None, epochs=300, lr=0.5) -> float:
    """Test accuracy of a :class:`LinearProbe` fit on the training split."""
    probe = LinearProbe(epochs=epochs, lr=lr).fit(train_X, train_y)
    return float(np.mean(probe.predict(test_X) == np.asarray(test_y)))


def utterance_embeddings(params, config, features):
    """Mean-pooled hidden state of every layer: array (n_utterances, L+1, d)."""
    hs = hidden_states(params, config, features)
    return np.stack([np.stack([h.mean(0) for h in H]) for H in hs])


def layerwise_probe(params, config, features, labels, train_idx, test_idx, n_classes=None,
                    epochs=300, lr=0.5) -> dict:
    """Intent-style probe accuracy for every layer."""
    E = utterance_embeddings(params, config, features)
    labels = np.asarray(labels)
    return {l: linear_probe(E[train_idx, l], labels[train_idx], E[test_idx, l], labels[test_idx],
                            n_classes, epochs, lr)
            for l in range(E.shape[1])}
