"""Independent reference implementations shared by the unit and acceptance tests."""

import itertools
import math

import numpy as np
from scipy.special import log_softmax

BLANK = 0


def _pca_scores(Xc, variance):
    """Principal-component scores via the covariance eigendecomposition."""
    w, V = np.linalg.eigh(Xc.T @ Xc)
    order = np.argsort(w)[::-1]
    w, V = w[order], V[:, order]
    keep = int(np.argmax(np.cumsum(w) / w.sum() >= variance)) + 1
    return Xc @ V[:, :keep]


def pwcca_textbook(X, Y, variance=0.99, eps=1e-8):
    Xc, Yc = X - X.mean(0), Y - Y.mean(0)
    A, B = _pca_scores(Xc, variance), _pca_scores(Yc, variance)
    n = X.shape[0]
    Saa = A.T @ A / (n - 1) + eps * np.eye(A.shape[1])
    Sbb = B.T @ B / (n - 1) + eps * np.eye(B.shape[1])
    Sab = A.T @ B / (n - 1)
    # X-side: eig of Saa^-1 Sab Sbb^-1 Sba gives rho^2 and directions
    M = np.linalg.solve(Saa, Sab) @ np.linalg.solve(Sbb, Sab.T)
    vals, vecs = np.linalg.eig(M)
    vals, vecs = vals.real, vecs.real
    # Y-side spectrum from the second eigenproblem bounds how many correlations exist
    vals_y = np.linalg.eigvals(np.linalg.solve(Sbb, Sab.T) @ np.linalg.solve(Saa, Sab)).real
    m = min(A.shape[1], B.shape[1])
    order = np.argsort(vals)[::-1][:m]
    rho = np.sqrt(np.clip(vals[order], 0, 1))
    assert np.allclose(np.sort(vals_y)[::-1][:m], vals[order], atol=1e-8)
    weights = []
    for j in order:
        h = A @ vecs[:, j]
        h = h / np.linalg.norm(h)
        weights.append(sum(abs(h @ Xc[:, c]) for c in range(Xc.shape[1])))
    weights = np.array(weights) / sum(weights)
    return float(weights @ rho)


def collapse(path):
    out, prev = [], None
    for a in path:
        if a != prev and a != BLANK:
            out.append(a)
        prev = a
    return out


def ctc_enumerated(logits, target):
    lp = log_softmax(logits, axis=1)
    T, C = logits.shape
    total = 0.0
    for path in itertools.product(range(C), repeat=T):
        if collapse(path) == list(target):
            total += math.exp(sum(lp[t, a] for t, a in enumerate(path)))
    return -math.log(total) if total > 0 else math.inf


def blobs(seed, n_per=20, centers=((0, 0), (10, 0), (0, 10)), spread=0.3):
    rng = np.random.default_rng(seed)
    X = np.concatenate([rng.normal(c, spread, (n_per, len(c))) for c in centers])
    y = np.repeat(np.arange(len(centers)), n_per)
    return X, y


def lloyd(X, C, iters=200):
    C = C.copy()
    for _ in range(iters):
        d = ((X[:, None, :] - C[None]) ** 2).sum(-1)
        lab = d.argmin(1)
        new = np.array([X[lab == j].mean(0) if np.any(lab == j) else C[j] for j in range(len(C))])
        if np.array_equal(new, C):
            break
        C = new
    return C


def inertia_oracle(X, C):
    return float(sum(min(((x - c) ** 2).sum() for c in C) for x in X))
