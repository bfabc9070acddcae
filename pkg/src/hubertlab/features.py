"""MFCC front end and frame-level alignment labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dct
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import EmptyFeatureError

SILENCE = -1
LOG_FLOOR = 1e-10


def layer_kind(layer: int) -> str:
    return f"layer:{int(layer)}"


def parse_kind(kind: str):
    """``"mfcc"`` -> None, ``"layer:6"`` -> 6."""
    if kind == "mfcc":
        return None
    if kind.startswith("layer:"):
        return int(kind.split(":", 1)[1])
    raise ValueError(f"unknown feature kind {kind!r}")


@dataclass(eq=False)
class FeatureSequence:
    utterance_id: str
    frames: np.ndarray
    frame_hop: float = 0.010
    frame_len: float = 0.025
    kind: str = "mfcc"

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    def frame_centers(self, sample_rate: int) -> np.ndarray:
        hop = int(round(self.frame_hop * sample_rate))
        win = int(round(self.frame_len * sample_rate))
        return np.arange(self.n_frames) * hop + win // 2


@dataclass(frozen=True)
class MfccConfig:
    preemphasis: float = 0.97
    frame_len: float = 0.025
    frame_hop: float = 0.010
    n_fft: int | None = None  # next power of two >= window
    n_filters: int = 23
    n_ceps: int = 13
    delta_width: int = 2
    fmin: float = 0.0
    fmax: float | None = None  # Nyquist


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_filters: int, n_fft: int, sample_rate: int, fmin=0.0, fmax=None) -> np.ndarray:
    """Triangular filters on linear frequency, edges evenly spaced in mel."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_filters + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lo) / (mid - lo)
    falling = (hi - bins) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def _window_sizes(cfg: MfccConfig, sample_rate: int):
    win = int(round(cfg.frame_len * sample_rate))
    hop = int(round(cfg.frame_hop * sample_rate))
    n_fft = cfg.n_fft or 1 << (win - 1).bit_length()
    return win, hop, n_fft


def deltas(feat: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over +-``width`` frames with edge replication."""
    T = feat.shape[0]
    padded = np.pad(feat, ((width, width), (0, 0)), mode="edge")
    denom = 2.0 * sum(n * n for n in range(1, width + 1))
    out = np.zeros_like(feat)
    for n in range(1, width + 1):
        out += n * (padded[width + n:width + n + T] - padded[width - n:width - n + T])
    return out / denom


def mfcc(utterance, config: MfccConfig | None = None) -> FeatureSequence:
    cfg = config or MfccConfig()
    x = np.asarray(utterance.samples, dtype=np.float64)
    sr = utterance.sample_rate
    win, hop, n_fft = _window_sizes(cfg, sr)
    if x.shape[0] < win:
        raise EmptyFeatureError(
            f"utterance {utterance.id}: {x.shape[0]} samples is shorter than one {win}-sample window"
        )
    emph = np.empty_like(x)
    emph[0] = x[0]
    emph[1:] = x[1:] - cfg.preemphasis * x[:-1]
    T = 1 + (x.shape[0] - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(T)[:, None]
    frames = emph[idx] * np.hamming(win)
    mag = np.abs(np.fft.rfft(frames, n_fft, axis=1))
    fb = mel_filterbank(cfg.n_filters, n_fft, sr, cfg.fmin, cfg.fmax)
    logmel = np.log(np.maximum(mag @ fb.T, LOG_FLOOR))
    ceps = dct(logmel, type=2, axis=1, norm="ortho")[:, :cfg.n_ceps]
    d1 = deltas(ceps, cfg.delta_width)
    d2 = deltas(d1, cfg.delta_width)
    return FeatureSequence(
        utterance_id=utterance.id,
        frames=np.hstack([ceps, d1, d2]),
        frame_hop=hop / sr,
        frame_len=win / sr,
        kind="mfcc",
    )


def frame_labels(utterance, feature: FeatureSequence, granularity: str = "phone",
                 silence_id: int = SILENCE) -> np.ndarray:
    """Label each frame by the span containing its center sample.

    Spans are half-open, so a center sitting on a boundary belongs to the
    later span.
    """
    if granularity == "phone":
        spans = utterance.phone_spans
    elif granularity == "word":
        spans = utterance.word_spans
    else:
        raise ValueError(f"granularity must be 'phone' or 'word', got {granularity!r}")
    centers = feature.frame_centers(utterance.sample_rate)
    labels = np.full(centers.shape[0], silence_id, dtype=np.int64)
    if not spans:
        return labels
    ids = np.array([s[0] for s in spans])
    starts = np.array([s[1] for s in spans])
    ends = np.array([s[2] for s in spans])
    pos = np.searchsorted(starts, centers, side="right") - 1
    ok = (pos >= 0)
    ok[ok] &= centers[ok] < ends[pos[ok]]
    labels[ok] = ids[pos[ok]]
    return labels


class MFCC(BaseEstimator, TransformerMixin):
    """Stateless transformer mapping utterances to 39-dim MFCC sequences."""

    def __init__(self, preemphasis=0.97, frame_len=0.025, frame_hop=0.010,
                 n_filters=23, n_ceps=13, delta_width=2):
        self.preemphasis = preemphasis
        self.frame_len = frame_len
        self.frame_hop = frame_hop
        self.n_filters = n_filters
        self.n_ceps = n_ceps
        self.delta_width = delta_width

    def _config(self):
        return MfccConfig(preemphasis=self.preemphasis, frame_len=self.frame_len,
                          frame_hop=self.frame_hop, n_filters=self.n_filters,
                          n_ceps=self.n_ceps, delta_width=self.delta_width)

    def fit(self, X, y=None):
        self.n_features_out_ = 3 * self.n_ceps
        return self

    def transform(self, X):
        cfg = self._config()
        return [mfcc(u, cfg) for u in X]
