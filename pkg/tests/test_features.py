import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hubertlab.corpus import CorpusConfig, Utterance, build_corpus
from hubertlab.errors import EmptyFeatureError
from hubertlab.features import (LOG_FLOOR, MFCC, SILENCE, FeatureSequence, deltas, frame_labels, layer_kind,
                                mfcc, parse_kind)


def _utt(x, spans=(), sr=16000):
    x = np.asarray(x, dtype=np.float64)
    return Utterance("u", x, sr, word_spans=tuple(spans), phone_spans=tuple(spans))


# ---------------------------------------------------------------- oracle

def _oracle_mfcc(x, sr=16000):
    """Direct-DFT MFCC written from the textbook definitions, loop by loop."""
    win, hop, nfft, nfilt, ncep = 400, 160, 512, 23, 13
    y = np.array([x[0]] + [x[i] - 0.97 * x[i - 1] for i in range(1, len(x))])
    T = 1 + (len(x) - win) // hop
    ham = np.array([0.54 - 0.46 * math.cos(2 * math.pi * n / (win - 1)) for n in range(win)])
    k = np.arange(nfft // 2 + 1)[:, None]
    n = np.arange(win)[None, :]
    W = np.exp(-2j * np.pi * k * n / nfft)  # direct DFT of the zero-padded frame
    mel = lambda f: 1127.0 * math.log(1.0 + f / 700.0)
    imel = lambda m: 700.0 * (math.exp(m / 1127.0) - 1.0)
    lo, hi = mel(0.0), mel(sr / 2)
    edges = [imel(lo + (hi - lo) * i / (nfilt + 1)) for i in range(nfilt + 2)]
    freqs = [b * sr / nfft for b in range(nfft // 2 + 1)]
    fb = np.zeros((nfilt, nfft // 2 + 1))
    for m in range(nfilt):
        a, c, b = edges[m], edges[m + 1], edges[m + 2]
        for j, f in enumerate(freqs):
            if a < f <= c:
                fb[m, j] = (f - a) / (c - a)
            elif c < f < b:
                fb[m, j] = (b - f) / (b - c)
    ceps = np.zeros((T, ncep))
    for t in range(T):
        mag = np.abs(W @ (y[t * hop:t * hop + win] * ham))
        e = np.log(np.maximum(fb @ mag, 1e-10))
        for q in range(ncep):
            s = sum(e[m] * math.cos(math.pi * q * (2 * m + 1) / (2 * nfilt)) for m in range(nfilt))
            ceps[t, q] = s * (math.sqrt(1.0 / nfilt) if q == 0 else math.sqrt(2.0 / nfilt))

    def delta(c):
        out = np.zeros_like(c)
        for t in range(len(c)):
            num = 0.0
            for d in (1, 2):
                num = num + d * (c[min(t + d, len(c) - 1)] - c[max(t - d, 0)])
            out[t] = num / 10.0
        return out

    d1 = delta(ceps)
    return np.hstack([ceps, d1, delta(d1)])


def test_sinusoid_matches_direct_dft_oracle():
    sr = 16000
    x = 0.5 * np.sin(2 * np.pi * 440.0 * np.arange(sr) / sr)
    got = mfcc(_utt(x)).frames
    want = _oracle_mfcc(x)
    assert got.shape == want.shape == (98, 39)
    scale = np.abs(want).max(0)
    assert np.all(np.abs(got - want) <= 1e-4 * np.maximum(np.abs(want), scale))


# ---------------------------------------------------------------- trivial cases

def test_silence_frames_are_log_floor_constant():
    f = mfcc(_utt(np.zeros(2000))).frames
    c0 = math.sqrt(23) * math.log(LOG_FLOOR)
    np.testing.assert_allclose(f[:, 0], c0, rtol=1e-12)
    # constant filterbank output leaves only c0 nonzero; deltas of a constant vanish
    np.testing.assert_allclose(f[:, 1:], 0.0, atol=1e-9)


@pytest.mark.parametrize("n", [400, 401, 559, 560, 16000, 12345])
def test_frame_count_and_dims(n):
    rng = np.random.default_rng(n)
    f = mfcc(_utt(rng.uniform(-1, 1, n)))
    assert f.frames.shape == (1 + (n - 400) // 160, 39)
    assert f.frame_hop == 0.01 and f.frame_len == 0.025


def test_short_waveform_is_empty_feature_error():
    with pytest.raises(EmptyFeatureError):
        mfcc(_utt(np.zeros(399)))


def test_shift_by_one_hop_shifts_rows():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 0.1, 8000)
    a = mfcc(_utt(x)).frames
    b = mfcc(_utt(x[160:])).frames
    # first frame differs through pre-emphasis at the cut; deltas reach 4 frames past it
    np.testing.assert_allclose(a[6:-5], b[5:a.shape[0] - 6], atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=400, max_size=900))
def test_finite_for_any_finite_input(samples):
    assert np.all(np.isfinite(mfcc(_utt(samples)).frames))


def test_deterministic_and_estimator(small_corpus):
    u = small_corpus[2][0]
    assert np.array_equal(mfcc(u).frames, mfcc(u).frames)
    est = MFCC()
    out = est.fit_transform([u])
    assert np.array_equal(out[0].frames, mfcc(u).frames)
    assert est.get_params()["n_ceps"] == 13


def test_deltas_of_linear_ramp_are_slope():
    ramp = np.arange(20, dtype=float)[:, None] * 3.0
    d = deltas(ramp, 2)
    np.testing.assert_allclose(d[2:-2], 3.0)


def test_kind_helpers():
    assert layer_kind(6) == "layer:6" and parse_kind("layer:6") == 6 and parse_kind("mfcc") is None
    with pytest.raises(ValueError):
        parse_kind("fbank")


# ---------------------------------------------------------------- frame labels

def test_single_phone_all_frames():
    u = _utt(np.zeros(3000), spans=[(4, 0, 3000)])
    assert np.all(frame_labels(u, mfcc(u)) == 4)


def test_center_on_boundary_goes_to_later_span():
    # frame 1 is centered on sample 160 + 200 = 360
    u = _utt(np.zeros(1200), spans=[(0, 0, 360), (1, 360, 1200)])
    labs = frame_labels(u, mfcc(u))
    assert labs[0] == 0 and labs[1] == 1


def test_frames_outside_spans_are_silence():
    u = _utt(np.zeros(2000), spans=[(2, 500, 900)])
    labs = frame_labels(u, mfcc(u))
    assert labs[0] == SILENCE and 2 in labs and labs[-1] == SILENCE


def test_labels_match_sample_scan_oracle():
    _, _, utts = build_corpus(CorpusConfig(n_utterances=6, seed=11))
    for u in utts:
        f = mfcc(u)
        for gran, spans in (("phone", u.phone_spans), ("word", u.word_spans)):
            per_sample = np.full(u.n_samples, SILENCE)
            for pid, s, e in spans:
                for i in range(s, e):
                    per_sample[i] = pid
            want = [per_sample[t * 160 + 200] if t * 160 + 200 < u.n_samples else SILENCE
                    for t in range(f.n_frames)]
            np.testing.assert_array_equal(frame_labels(u, f, gran), want)


def test_frame_centers():
    fs = FeatureSequence("x", np.zeros((3, 39)))
    np.testing.assert_array_equal(fs.frame_centers(16000), [200, 360, 520])
