"""Streaming minibatch k-means used to produce frame pseudo-labels.

Only the codebook (K x D centroids plus counters) persists between calls, so
clustering a corpus needs memory proportional to one minibatch, not to the
corpus.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_frames
from .errors import ConfigError, ShapeError
from .tensorio import atomic_write_text, load_tensor, save_tensor

# bounds the (rows x K x D) difference block built while assigning
_BLOCK_ELEMENTS = 1 << 18


@dataclass(eq=False)
class Codebook:
    centroids: np.ndarray
    counts: np.ndarray
    kind: str = "mfcc"
    # assignments since the last dead-cluster check
    recent: np.ndarray = field(default=None)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise ShapeError("codebook centroids must be a non-empty K x D matrix")
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.recent is None:
            self.recent = np.zeros(self.k)

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])

    def copy(self) -> "Codebook":
        return Codebook(self.centroids.copy(), self.counts.copy(), self.kind, self.recent.copy())

    def save(self, path) -> None:
        """Centroids as a tensor file plus a ``.json`` sidecar."""
        path = Path(path)
        save_tensor(path, self.centroids)
        sidecar = {"k": self.k, "kind": self.kind, "counts": [int(c) for c in self.counts]}
        atomic_write_text(path.with_suffix(".json"), json.dumps(sidecar))

    @classmethod
    def load(cls, path) -> "Codebook":
        path = Path(path)
        centroids = load_tensor(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        if meta["k"] != centroids.shape[0]:
            raise ShapeError(f"codebook sidecar k={meta['k']} but tensor has {centroids.shape[0]} rows")
        return cls(centroids, np.asarray(meta["counts"], dtype=np.float64), meta["kind"])


def squared_distances(frames: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact ||x - c||^2 (no norm expansion, so symmetric ties stay ties)."""
    n, k = frames.shape[0], centroids.shape[0]
    out = np.empty((n, k))
    rows = max(1, _BLOCK_ELEMENTS // max(1, k * centroids.shape[1]))
    for i in range(0, n, rows):
        diff = frames[i:i + rows, None, :] - centroids[None, :, :]
        out[i:i + rows] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def nearest(frames: np.ndarray, centroids: np.ndarray):
    """Index (lowest on ties) and squared distance of the nearest centroid."""
    n = frames.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dist = np.empty(n)
    rows = max(1, _BLOCK_ELEMENTS // max(1, centroids.shape[0] * centroids.shape[1]))
    for i in range(0, n, rows):
        d = squared_distances(frames[i:i + rows], centroids)
        lab = np.argmin(d, axis=1)
        labels[i:i + rows] = lab
        dist[i:i + rows] = d[np.arange(d.shape[0]), lab]
    return labels, dist


def init_codebook(k: int, sample, seed=0, kind: str = "mfcc") -> Codebook:
    """k-means++ seeding over ``sample``."""
    sample = check_frames(sample)
    n = sample.shape[0]
    if k < 1:
        raise ConfigError("k must be >= 1")
    if k > n:
        raise ConfigError(f"k={k} exceeds the {n} sample rows available for seeding")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    d2 = squared_distances(sample, sample[chosen[0]][None, :])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # only duplicates of chosen rows remain
            free = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(free))
        chosen.append(idx)
        d2 = np.minimum(d2, squared_distances(sample, sample[idx][None, :])[:, 0])
    return Codebook(sample[chosen].copy(), np.zeros(k), kind)


def partial_fit(codebook: Codebook, minibatch) -> Codebook:
    """One streaming-mean update; mutates and returns ``codebook``.

    Every frame is assigned with the centroids as they stood at the start of
    the batch; centroid c then absorbs its frames with step 1/count_c, which
    is the same as the running mean over everything it has ever received.
    """
    x = check_frames(minibatch)
    if x.shape[1] != codebook.dim:
        raise ShapeError(f"minibatch has {x.shape[1]} dims, codebook expects {codebook.dim}")
    if x.shape[0] == 0:
        return codebook
    labels, _ = nearest(x, codebook.centroids)
    k = codebook.k
    n_c = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.zeros_like(codebook.centroids)
    np.add.at(sums, labels, x)
    hit = n_c > 0
    new_counts = codebook.counts + n_c
    c = codebook.centroids
    c[hit] += (sums[hit] - n_c[hit, None] * c[hit]) / new_counts[hit, None]
    codebook.counts = new_counts
    codebook.recent = codebook.recent + n_c
    return codebook


def assign(codebook: Codebook, features) -> np.ndarray:
    frames = features.frames if hasattr(features, "frames") else features
    kind = getattr(features, "kind", None)
    if kind is not None and kind != codebook.kind:
        raise ShapeError(f"features of kind {kind!r} cannot be assigned with a {codebook.kind!r} codebook")
    frames = check_frames(frames)
    if frames.shape[1] != codebook.dim:
        raise ShapeError(f"features have {frames.shape[1]} dims, codebook expects {codebook.dim}")
    labels, _ = nearest(frames, codebook.centroids)
    return labels


def inertia(codebook: Codebook, frames) -> float:
    _, d = nearest(check_frames(frames), codebook.centroids)
    return float(d.sum())


def dead_cluster_repair(codebook: Codebook, reservoir, threshold: int = 1) -> Codebook:
    """Re-seed centroids that received fewer than ``threshold`` frames since the last check.

    Each dead centroid moves to the reservoir frame farthest from its nearest
    centroid (distinct frames for distinct dead centroids) and restarts with
    count 0. Closes the epoch: recent counters reset.
    """
    reservoir = check_frames(reservoir)
    if reservoir.shape[0] == 0:
        raise ConfigError("dead_cluster_repair: reservoir is empty")
    dead = np.flatnonzero(codebook.recent < threshold)
    if dead.size:
        _, dist = nearest(reservoir, codebook.centroids)
        order = np.argsort(-dist, kind="stable")
        for j, c in enumerate(dead[: reservoir.shape[0]]):
            codebook.centroids[c] = reservoir[order[j]]
            codebook.counts[c] = 0.0
    codebook.recent = np.zeros(codebook.k)
    return codebook


def iter_minibatches(sequences, batch_size: int, seed=0):
    """Yield ``batch_size``-frame slabs from sequences visited in a seeded order."""
    order = np.random.default_rng(seed).permutation(len(sequences))
    buf, size = [], 0
    for i in order:
        frames = sequences[i].frames if hasattr(sequences[i], "frames") else sequences[i]
        start = 0
        while start < frames.shape[0]:
            take = min(batch_size - size, frames.shape[0] - start)
            buf.append(frames[start:start + take])
            size += take
            start += take
            if size == batch_size:
                yield np.concatenate(buf)
                buf, size = [], 0
    if size:
        yield np.concatenate(buf)


class StreamingKMeans(BaseEstimator, ClusterMixin, TransformerMixin):
    """Minibatch k-means with per-centroid 1/count learning rate.

    Parameters
    ----------
    n_clusters : int
        Codebook size K.
    batch_size : int, default=1024
        Frames per ``partial_fit`` call when fitting from a corpus.
    n_passes : int, default=3
        Passes over the data in ``fit``.
    init_size : int, default=4096
        Frames gathered (from the head of the first pass) for k-means++ seeding.
    repair_threshold : int, default=0
        Dead-cluster threshold checked after every pass; 0 disables repair.
    random_state : int, default=0
        Seeds initialisation and the pass order.
    kind : str, default="mfcc"
        Feature kind recorded in the codebook.
    """

    def __init__(self, n_clusters=100, batch_size=1024, n_passes=3, init_size=4096,
                 repair_threshold=0, random_state=0, kind="mfcc"):
        self.n_clusters = n_clusters
        self.batch_size = batch_size
        self.n_passes = n_passes
        self.init_size = init_size
        self.repair_threshold = repair_threshold
        self.random_state = random_state
        self.kind = kind

    def _as_sequences(self, X):
        if isinstance(X, np.ndarray) and X.ndim == 2:
            return [X]
        return list(X)

    def fit(self, X, y=None):
        """Fit on a 2-D array or a list of frame matrices / FeatureSequences."""
        seqs = self._as_sequences(X)
        seed = self.random_state
        head = []
        got = 0
        for batch in iter_minibatches(seqs, self.batch_size, seed=[seed, 0]):
            head.append(batch)
            got += batch.shape[0]
            if got >= max(self.init_size, self.n_clusters):
                break
        sample = np.concatenate(head)[: max(self.init_size, self.n_clusters)]
        self.codebook_ = init_codebook(self.n_clusters, sample, seed=[seed, 1], kind=self.kind)
        for p in range(self.n_passes):
            last = None
            for batch in iter_minibatches(seqs, self.batch_size, seed=[seed, 2, p]):
                partial_fit(self.codebook_, batch)
                last = batch
            if self.repair_threshold > 0 and last is not None and p < self.n_passes - 1:
                dead_cluster_repair(self.codebook_, last, self.repair_threshold)
        self._sync()
        return self

    def partial_fit(self, X, y=None):
        X = check_frames(X)
        if not hasattr(self, "codebook_"):
            self.codebook_ = init_codebook(self.n_clusters, X, seed=self.random_state, kind=self.kind)
        partial_fit(self.codebook_, X)
        self._sync()
        return self

    def _sync(self):
        self.cluster_centers_ = self.codebook_.centroids
        self.counts_ = self.codebook_.counts
        self.n_features_in_ = self.codebook_.dim

    def predict(self, X):
        check_is_fitted(self, "codebook_")
        if isinstance(X, np.ndarray):
            return assign(self.codebook_, X)
        return [assign(self.codebook_, s) for s in X]

    def transform(self, X):
        check_is_fitted(self, "codebook_")
        return np.sqrt(squared_distances(check_frames(X), self.codebook_.centroids))

    def score(self, X, y=None):
        check_is_fitted(self, "codebook_")
        return -inertia(self.codebook_, X)
