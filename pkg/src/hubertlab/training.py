"""Optimizer, schedule and the pretraining loop for one iteration."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_frame_list, check_label_list
from .encoder import (
    EncoderConfig,
    extract_embeddings,
    forward,
    init_params,
    loss_and_grad,
    sample_mask,
    trainable,
)
from .errors import ConfigError, DivergenceError, IngestionError
from .tensorio import as_stored, atomic_write_text, load_tensor, save_tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 4
    accumulation: int = 1
    peak_lr: float = 2e-3
    warmup_fraction: float = 0.08
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 0.0  # global-norm clip; 0 disables
    checkpoint_every: int = 0
    max_frames: int = 512
    compute_dtype: str = "float32"
    divergence_margin: float = 1.0
    divergence_fraction: float = 0.2
    seed: int = 0

    def validate(self):
        if self.total_steps < 1:
            raise ConfigError("train.total_steps must be >= 1")
        if self.accumulation < 1 or self.batch_size < 1:
            raise ConfigError("train.accumulation and train.batch_size must be >= 1")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigError("train.warmup_fraction must lie in (0, 1)")
        if self.compute_dtype not in ("float32", "float64"):
            raise ConfigError("train.compute_dtype must be 'float32' or 'float64'")
        if self.max_frames < 1:
            raise ConfigError("train.max_frames must be >= 1")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        names = trainable(params)
        return cls({k: np.zeros_like(params[k]) for k in names},
                   {k: np.zeros_like(params[k]) for k in names}, 0)


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)        # dicts: step, loss, masked_acc, lr
    checkpoints: list = field(default_factory=list)  # dicts: step, path
    events: list = field(default_factory=list)

    def record(self, step, loss, acc, lr):
        if self.steps and step <= self.steps[-1]["step"]:
            raise ValueError("log steps must be strictly increasing")
        self.steps.append({"step": int(step), "loss": float(loss), "masked_acc": float(acc), "lr": float(lr)})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "masked_acc", "lr"])
        for r in self.steps:
            w.writerow([r["step"], repr(r["loss"]), repr(r["masked_acc"]), repr(r["lr"])])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        atomic_write_text(path, self.to_csv())

    @staticmethod
    def read_csv(path) -> "TrainLog":
        out = TrainLog()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.record(int(row["step"]), float(row["loss"]), float(row["masked_acc"]), float(row["lr"]))
        return out

    def losses(self):
        return np.array([r["loss"] for r in self.steps])


def lr_at(step, config: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then linear decay to 0 at ``total_steps``."""
    total = config.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warm = config.warmup_fraction * total
    if step <= warm:
        return config.peak_lr * step / warm
    return config.peak_lr * (total - step) / (total - warm)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, config: TrainConfig):
    """Bias-corrected Adam with decoupled weight decay, in place.

    Returns ``(params, state, applied)``. Any non-finite gradient skips the
    whole update: neither parameters nor moments change.
    """
    names = [k for k in trainable(params) if k in grads]
    for k in names:
        if not np.all(np.isfinite(grads[k])):
            log.warning("non-finite gradient in %s; optimizer step skipped", k)
            return params, state, False
    b1, b2 = config.beta1, config.beta2
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k in names:
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        if config.weight_decay:
            update = update + config.weight_decay * params[k]
        params[k] -= lr * update
    return params, state, True


def feature_stats(sequences):
    frames = np.concatenate([np.asarray(getattr(s, "frames", s)) for s in sequences])
    mean = frames.mean(0)
    scale = frames.std(0)
    scale[scale < 1e-8] = 1.0
    return mean, scale


def _utterance_stream(n, seed):
    """Endless seeded epoch permutations of ``range(n)``."""
    epoch = 0
    while True:
        for i in np.random.default_rng([seed, 7, epoch]).permutation(n):
            yield int(i)
        epoch += 1


def utterance_grad(params_c, enc: EncoderConfig, frames, labels, rng, max_frames):
    """Forward/backward of one utterance with a fresh mask and crop."""
    T = frames.shape[0]
    if T > max_frames:
        start = int(rng.integers(0, T - max_frames + 1))
        frames = frames[start:start + max_frames]
        labels = labels[start:start + max_frames]
        T = max_frames
    mask = sample_mask(T, enc, rng)
    trace = forward(params_c, enc, frames, mask, train_mode=True, rng=rng)
    return loss_and_grad(params_c, enc, trace, labels)


def pretrain_iteration(params_init: dict, enc: EncoderConfig, features, labels, config: TrainConfig,
                       checkpoint_dir=None, iteration: int = 0, step_callback=None):
    """Run ``config.total_steps`` optimizer steps of masked prediction.

    Each step averages the gradients of ``accumulation`` minibatches of
    ``batch_size`` utterances (so the virtual batch is their product) before
    one :func:`adam_step`. Returns ``(params, TrainLog)``; raises
    :class:`DivergenceError` when the smoothed loss stays above
    ``ln K + divergence_margin`` for too long after warmup.
    """
    cfg = config.validate()
    enc.validate()
    feats = check_frame_list([getattr(f, "frames", f) for f in features], n_features=enc.input_dim)
    labs = check_label_list([getattr(l, "labels", l) for l in labels], [f.shape[0] for f in feats], enc.vocab)
    params = {k: np.array(v, dtype=np.float64) for k, v in params_init.items()}
    state = AdamState.zeros(params)
    tlog = TrainLog()
    dtype = np.dtype(cfg.compute_dtype)
    stream = _utterance_stream(len(feats), cfg.seed)
    visit = 0
    names = trainable(params)
    warm_end = cfg.warmup_fraction * cfg.total_steps
    window = max(1, cfg.total_steps // 50)
    recent = []
    threshold = math.log(enc.vocab) + cfg.divergence_margin
    bad = 0
    for step in range(1, cfg.total_steps + 1):
        params_c = params if dtype == np.float64 else {k: v.astype(dtype) for k, v in params.items()}
        total = {k: np.zeros_like(params[k]) for k in names}
        loss_sum = 0.0
        n_masked = n_correct = 0
        for _ in range(cfg.accumulation):
            mb = {k: np.zeros_like(params[k]) for k in names}
            mb_loss = 0.0
            for _ in range(cfg.batch_size):
                i = next(stream)
                rng = np.random.default_rng([cfg.seed, 11, visit])
                visit += 1
                r = utterance_grad(params_c, enc, feats[i], labs[i], rng, cfg.max_frames)
                for k in names:
                    mb[k] += r.grads[k]
                mb_loss += r.loss
                n_masked += r.n_masked
                n_correct += r.n_correct
            for k in names:
                total[k] += mb[k] / cfg.batch_size
            loss_sum += mb_loss / cfg.batch_size
        grads = {k: g / cfg.accumulation for k, g in total.items()}
        loss = loss_sum / cfg.accumulation
        if cfg.grad_clip > 0:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > cfg.grad_clip:
                grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
        lr = lr_at(step, cfg)
        params, state, applied = adam_step(params, grads, state, lr, cfg)
        if not applied:
            tlog.events.append({"step": step, "event": "skipped_nonfinite_grad"})
        acc = n_correct / n_masked if n_masked else 0.0
        tlog.record(step, loss, acc, lr)
        if step_callback is not None:
            step_callback(step, loss, acc)

        recent.append(loss if math.isfinite(loss) else float("inf"))
        if len(recent) > window:
            recent.pop(0)
        if step > warm_end and np.mean(recent) > threshold:
            bad += 1
            if bad >= cfg.divergence_fraction * cfg.total_steps:
                report = {"iteration": iteration, "step": step, "running_loss": float(np.mean(recent)),
                          "threshold": threshold, "steps_above": bad}
                raise DivergenceError(f"iteration {iteration} diverged at step {step}",
                                      report=report, params=params, log=tlog)
        if checkpoint_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"step{step:07d}"
            save_checkpoint(path, params, enc, step=step, iteration=iteration)
            tlog.checkpoints.append({"step": step, "path": str(path)})
    params = {k: as_stored(v) for k, v in params.items()}
    return params, tlog


def masked_accuracy(params: dict, enc: EncoderConfig, features, labels, seed=0, compute_dtype="float32"):
    """Masked-prediction accuracy over a corpus with fresh seeded masks (eval mode)."""
    dtype = np.dtype(compute_dtype)
    pc = {k: v.astype(dtype) for k, v in params.items()}
    n = correct = 0
    for i, (f, lab) in enumerate(zip(features, labels)):
        x = np.asarray(getattr(f, "frames", f))
        lab = np.asarray(getattr(lab, "labels", lab))
        mask = sample_mask(x.shape[0], enc, [seed, 13, i])
        if len(mask) == 0:
            continue
        tr = forward(pc, enc, x, mask)
        idx = mask.indices
        correct += int((tr.logits[idx].argmax(1) == lab[idx]).sum())
        n += idx.size
    return correct / n if n else 0.0


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: dict, enc: EncoderConfig, step: int = 0, iteration: int = 0,
                    extra: dict | None = None) -> str:
    """Write ``manifest.json`` plus one tensor file per parameter; return the manifest sha256."""
    path = Path(path)
    table = {}
    for name in sorted(params):
        fname = f"tensors/{name}.tnsr"
        digest = save_tensor(path / fname, params[name])
        table[name] = {"file": fname, "shape": list(np.shape(params[name])), "sha256": digest}
    manifest = {"config": enc.to_dict(), "step": int(step), "iteration": int(iteration), "tensors": table}
    if extra:
        manifest.update(extra)
    text = json.dumps(manifest, indent=1, sort_keys=True)
    atomic_write_text(path / "manifest.json", text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_checkpoint(path):
    """Return ``(params, EncoderConfig, manifest)``."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestionError(f"checkpoint manifest: cannot read {path}: {exc}") from exc
    enc = EncoderConfig(**manifest["config"])
    params = {}
    for name, entry in manifest["tensors"].items():
        arr = load_tensor(path / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise IngestionError(f"checkpoint tensor {name!r}: shape {arr.shape} != manifest {entry['shape']}")
        params[name] = arr
    return params, enc, manifest


def manifest_hash(path) -> str:
    return hashlib.sha256((Path(path) / "manifest.json").read_bytes()).hexdigest()


# ---------------------------------------------------------------- estimator

class MaskedPredictionPretrainer(BaseEstimator, TransformerMixin):
    """One pretraining iteration behind a fit/transform interface.

    ``fit(X, y)`` takes frame sequences and matching pseudo-label sequences;
    ``transform(X)`` returns hidden states of ``layer`` for each sequence.
    """

    def __init__(self, n_layers=6, d_model=64, n_heads=4, d_ff=128, n_clusters=100,
                 mask_span=5, mask_prob=0.08, dropout=0.1, head="linear",
                 total_steps=2000, batch_size=4, accumulation=1, peak_lr=2e-3,
                 warmup_fraction=0.08, weight_decay=0.01, layer=None, random_state=0):
        self.n_layers = n_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.n_clusters = n_clusters
        self.mask_span = mask_span
        self.mask_prob = mask_prob
        self.dropout = dropout
        self.head = head
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.accumulation = accumulation
        self.peak_lr = peak_lr
        self.warmup_fraction = warmup_fraction
        self.weight_decay = weight_decay
        self.layer = layer
        self.random_state = random_state

    def _configs(self, input_dim):
        enc = EncoderConfig(n_layers=self.n_layers, d_model=self.d_model, n_heads=self.n_heads,
                            d_ff=self.d_ff, input_dim=input_dim, vocab=self.n_clusters,
                            mask_span=self.mask_span, mask_prob=self.mask_prob,
                            dropout=self.dropout, head=self.head).validate()
        train = TrainConfig(total_steps=self.total_steps, batch_size=self.batch_size,
                            accumulation=self.accumulation, peak_lr=self.peak_lr,
                            warmup_fraction=self.warmup_fraction, weight_decay=self.weight_decay,
                            seed=self.random_state).validate()
        return enc, train

    def fit(self, X, y):
        frames = check_frame_list([getattr(x, "frames", x) for x in X])
        enc, train = self._configs(frames[0].shape[1])
        mean, scale = feature_stats(frames)
        init = init_params(enc, seed=self.random_state, input_mean=mean, input_scale=scale)
        self.params_, self.log_ = pretrain_iteration(init, enc, frames, y, train)
        self.encoder_config_ = enc
        self.n_features_in_ = enc.input_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        layer = self.n_layers if self.layer is None else self.layer
        return [e.frames for e in extract_embeddings(self.params_, self.encoder_config_, X, layer)]

    def predict(self, X):
        """Most likely cluster id per frame (unmasked input)."""
        check_is_fitted(self, "params_")
        return [forward(self.params_, self.encoder_config_, x).logits.argmax(1) for x in X]

    def score(self, X, y):
        check_is_fitted(self, "params_")
        return masked_accuracy(self.params_, self.encoder_config_, X, y, seed=self.random_state)
