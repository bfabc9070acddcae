"""Synthetic speech-like corpus with exact phone/word alignments, plus WAV I/O.

Phones are short mixtures of sinusoids; words are phone strings; utterances
concatenate words and optionally add white noise at a chosen SNR.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, IngestionError
from .tensorio import atomic_write_bytes, atomic_write_text

DEFAULT_SAMPLE_RATE = 16000


@dataclass(frozen=True)
class PhoneSignature:
    frequencies: tuple  # Hz
    amplitudes: tuple
    ramp: float = 0.01  # seconds of raised-cosine attack/release; 0 disables


@dataclass(frozen=True)
class PhoneInventory:
    signatures: tuple

    def __post_init__(self):
        if len(self.signatures) < 2:
            raise ConfigError("phone inventory: need at least 2 phones")
        keys = {(s.frequencies, s.amplitudes) for s in self.signatures}
        if len(keys) != len(self.signatures):
            raise ConfigError("phone inventory: signatures must be pairwise distinct")

    @property
    def n_phones(self) -> int:
        return len(self.signatures)

    @classmethod
    def random(cls, n_phones: int = 12, seed: int = 0, n_partials: int = 3,
               fmin: float = 200.0, fmax: float = 4000.0) -> "PhoneInventory":
        rng = np.random.default_rng([seed, 101])
        sigs = []
        # log-spaced base frequencies keep phones spectrally distinct
        bases = np.geomspace(fmin, fmax / n_partials, n_phones)
        rng.shuffle(bases)
        for base in bases:
            mult = np.sort(rng.uniform(1.0, float(n_partials) + 0.5, n_partials - 1))
            freqs = (float(base),) + tuple(float(base * m) for m in mult)
            amps = rng.dirichlet(np.ones(n_partials)) * 0.8
            sigs.append(PhoneSignature(tuple(round(f, 3) for f in freqs),
                                       tuple(round(float(a), 6) for a in amps)))
        return cls(tuple(sigs))


@dataclass(frozen=True)
class Lexicon:
    words: tuple  # tuple of tuples of phone ids

    def __post_init__(self):
        if len(self.words) == 0:
            raise ConfigError("lexicon: empty lexicon")
        if any(len(w) == 0 for w in self.words):
            raise ConfigError("lexicon: every word needs at least one phone")

    @property
    def vocab_size(self) -> int:
        return len(self.words)

    @classmethod
    def random(cls, n_words: int, n_phones: int, seed: int = 0,
               min_len: int = 1, max_len: int = 5) -> "Lexicon":
        if n_words < 1:
            raise ConfigError("lexicon: n_words must be >= 1")
        rng = np.random.default_rng([seed, 202])
        words, seen = [], set()
        attempts = 0
        while len(words) < n_words:
            n = int(rng.integers(min_len, max_len + 1))
            w = tuple(int(p) for p in rng.integers(0, n_phones, n))
            attempts += 1
            if w in seen and attempts < 100 * n_words:
                continue
            seen.add(w)
            words.append(w)
        return cls(tuple(words))


@dataclass(frozen=True, eq=False)
class Utterance:
    id: str
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE
    word_spans: tuple = ()   # (word_id, start, end), end exclusive
    phone_spans: tuple = ()  # (phone_id, start, end)
    label: Optional[int] = None

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def words(self) -> list:
        return [w for w, _, _ in self.word_spans]

    @property
    def phones(self) -> list:
        return [p for p, _, _ in self.phone_spans]


@dataclass(frozen=True)
class CorpusConfig:
    n_utterances: int = 200
    n_phones: int = 12
    n_words: int = 40
    n_classes: int = 8
    min_words: int = 3
    max_words: int = 8
    phone_ms: tuple = (80.0, 200.0)
    snr_db: float = 20.0
    sample_rate: int = DEFAULT_SAMPLE_RATE
    seed: int = 0

    def validate(self):
        if self.n_utterances < 1:
            raise ConfigError("corpus.n_utterances must be >= 1")
        if not 1 <= self.min_words <= self.max_words:
            raise ConfigError("corpus: need 1 <= min_words <= max_words")
        if self.n_classes < 1:
            raise ConfigError("corpus.n_classes must be >= 1")
        lo, hi = self.phone_ms
        if not 0 < lo <= hi:
            raise ConfigError("corpus.phone_ms must satisfy 0 < lo <= hi")
        return self


def synthesize_phone(sig: PhoneSignature, n_samples: int, sample_rate: int) -> np.ndarray:
    n = np.arange(n_samples, dtype=np.float64)
    out = np.zeros(n_samples)
    for f, a in zip(sig.frequencies, sig.amplitudes):
        out += a * np.sin(2.0 * np.pi * f * n / sample_rate)
    ramp = int(round(sig.ramp * sample_rate))
    ramp = min(ramp, n_samples // 2)
    if ramp > 0:
        env = 0.5 - 0.5 * np.cos(np.pi * (np.arange(ramp) + 0.5) / ramp)
        out[:ramp] *= env
        out[n_samples - ramp:] *= env[::-1]
    return out


def utterance_label(word_ids: Sequence[int], n_classes: int) -> int:
    return int(sum(word_ids) % n_classes)


def generate_corpus(seed: int, n_utterances: int, inventory: PhoneInventory, lexicon: Lexicon,
                    config: CorpusConfig | None = None) -> list:
    """Generate ``n_utterances`` utterances; a pure function of its arguments."""
    if lexicon is None or len(lexicon.words) == 0:
        raise ConfigError("lexicon: empty lexicon")
    if n_utterances < 1:
        raise ConfigError("n_utterances must be >= 1")
    cfg = (config or CorpusConfig()).validate()
    sr = cfg.sample_rate
    rng = np.random.default_rng([seed, 303])
    lo = int(round(cfg.phone_ms[0] * sr / 1000.0))
    hi = int(round(cfg.phone_ms[1] * sr / 1000.0))
    out = []
    for u in range(n_utterances):
        n_words = int(rng.integers(cfg.min_words, cfg.max_words + 1))
        word_ids = [int(w) for w in rng.integers(0, lexicon.vocab_size, n_words)]
        chunks, word_spans, phone_spans = [], [], []
        pos = 0
        for w in word_ids:
            w_start = pos
            for p in lexicon.words[w]:
                dur = int(rng.integers(lo, hi + 1))
                chunks.append(synthesize_phone(inventory.signatures[p], dur, sr))
                phone_spans.append((int(p), pos, pos + dur))
                pos += dur
            word_spans.append((w, w_start, pos))
        clean = np.concatenate(chunks)
        if math.isfinite(cfg.snr_db):
            power = float(np.mean(clean ** 2))
            std = math.sqrt(power / 10.0 ** (cfg.snr_db / 10.0))
            noisy = clean + rng.normal(0.0, std, clean.shape[0])
        else:
            noisy = clean
        samples = np.clip(noisy, -1.0, 1.0)
        samples.setflags(write=False)
        out.append(Utterance(
            id=f"utt{u:05d}", samples=samples, sample_rate=sr,
            word_spans=tuple(word_spans), phone_spans=tuple(phone_spans),
            label=utterance_label(word_ids, cfg.n_classes),
        ))
    return out


def build_corpus(config: CorpusConfig):
    """Inventory, lexicon and utterances derived from one config."""
    cfg = config.validate()
    inventory = PhoneInventory.random(cfg.n_phones, seed=cfg.seed)
    lexicon = Lexicon.random(cfg.n_words, cfg.n_phones, seed=cfg.seed)
    utts = generate_corpus(cfg.seed, cfg.n_utterances, inventory, lexicon, cfg)
    return inventory, lexicon, utts


# ---------------------------------------------------------------- WAV I/O

def write_wav(path, samples, sample_rate: int = DEFAULT_SAMPLE_RATE, fmt: str = "pcm16") -> None:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    if fmt == "pcm16":
        pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        code, bits = 1, 16
    elif fmt == "float32":
        pcm = x.astype("<f4").tobytes()
        code, bits = 3, 32
    else:
        raise ConfigError(f"wav format: unsupported {fmt!r}")
    block = bits // 8
    fmt_chunk = struct.pack("<HHIIHH", code, 1, sample_rate, sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt_chunk)) + fmt_chunk
    body += b"data" + struct.pack("<I", len(pcm)) + pcm
    atomic_write_bytes(path, b"RIFF" + struct.pack("<I", len(body)) + body)


def load_wav(path, utterance_id: str | None = None) -> Utterance:
    """Read a mono PCM16 or float32 RIFF file into an unlabeled utterance."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IngestionError(f"wav file: cannot read {path}: {exc}") from exc
    if len(blob) < 12 or blob[:4] != b"RIFF":
        raise IngestionError("wav header field 'ChunkID': expected b'RIFF'")
    if blob[8:12] != b"WAVE":
        raise IngestionError("wav header field 'Format': expected b'WAVE'")
    off = 12
    fmt = None
    data = None
    while off + 8 <= len(blob):
        cid = blob[off:off + 4]
        (size,) = struct.unpack_from("<I", blob, off + 4)
        payload = blob[off + 8:off + 8 + size]
        if len(payload) < size:
            raise IngestionError(f"wav chunk {cid!r}: 'Subchunk2Size' exceeds file length")
        if cid == b"fmt ":
            if size < 16:
                raise IngestionError("wav header field 'Subchunk1Size': fmt chunk too small")
            fmt = struct.unpack_from("<HHIIHH", payload, 0)
        elif cid == b"data":
            data = payload
        off += 8 + size + (size & 1)
    if fmt is None:
        raise IngestionError("wav header field 'fmt ': chunk missing")
    if data is None:
        raise IngestionError("wav header field 'data': chunk missing")
    code, channels, sr, _, _, bits = fmt
    if channels != 1:
        raise IngestionError(f"wav header field 'NumChannels': expected 1, got {channels}")
    if code == 1 and bits == 16:
        if len(data) % 2:
            raise IngestionError("wav 'data' length not a multiple of the sample size")
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif code == 3 and bits == 32:
        if len(data) % 4:
            raise IngestionError("wav 'data' length not a multiple of the sample size")
        samples = np.clip(np.frombuffer(data, dtype="<f4").astype(np.float64), -1.0, 1.0)
    elif code in (1, 3):
        raise IngestionError(f"wav header field 'BitsPerSample': unsupported {bits} for AudioFormat {code}")
    else:
        raise IngestionError(f"wav header field 'AudioFormat': unsupported codec {code}")
    samples.setflags(write=False)
    return Utterance(id=utterance_id or path.stem, samples=samples, sample_rate=int(sr))


# ---------------------------------------------------------------- manifest

def write_manifest(path, utterances, wav_dir=None, extra: dict | None = None) -> Path:
    """Write WAVs (when ``wav_dir`` is given) and the JSON manifest describing them."""
    path = Path(path)
    entries = []
    for utt in utterances:
        wav_path = None
        if wav_dir is not None:
            wav_path = Path(wav_dir) / f"{utt.id}.wav"
            write_wav(wav_path, utt.samples, utt.sample_rate, fmt="float32")
            try:
                wav_path = wav_path.relative_to(path.parent)
            except ValueError:
                pass
        entries.append({
            "id": utt.id,
            "path": None if wav_path is None else str(wav_path),
            "sample_rate": utt.sample_rate,
            "word_spans": [list(s) for s in utt.word_spans],
            "phone_spans": [list(s) for s in utt.phone_spans],
            "label": utt.label,
        })
    doc = {"utterances": entries}
    if extra:
        doc.update(extra)
    atomic_write_text(path, json.dumps(doc, indent=1))
    return path


def read_manifest(path) -> list:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestionError(f"manifest: cannot parse {path}: {exc}") from exc
    utts = []
    for entry in doc.get("utterances", []):
        for key in ("id", "path", "sample_rate", "word_spans", "phone_spans", "label"):
            if key not in entry:
                raise IngestionError(f"manifest entry field {key!r}: missing")
        wav_path = Path(entry["path"])
        if not wav_path.is_absolute():
            wav_path = path.parent / wav_path
        raw = load_wav(wav_path, utterance_id=entry["id"])
        if raw.sample_rate != entry["sample_rate"]:
            raise IngestionError(f"manifest entry field 'sample_rate': {entry['sample_rate']} != file {raw.sample_rate}")
        utts.append(Utterance(
            id=entry["id"], samples=raw.samples, sample_rate=raw.sample_rate,
            word_spans=tuple(tuple(int(v) for v in s) for s in entry["word_spans"]),
            phone_spans=tuple(tuple(int(v) for v in s) for s in entry["phone_spans"]),
            label=entry["label"],
        ))
    return utts
