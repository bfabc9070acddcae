"""Masked-prediction transformer encoder with an explicit backward pass.

Parameters live in a flat ``dict`` of float64 arrays. ``forward`` returns a
:class:`ForwardTrace` holding every activation the backward pass needs, so
gradients are exact reverse-mode derivatives (checked against finite
differences in the test suite).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ShapeError

LN_EPS = 1e-5
NORM_EPS = 1e-12
GELU_C = math.sqrt(2.0 / math.pi)

# non-trainable entries of the parameter dict
BUFFERS = ("input.mean", "input.scale")


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 6
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    input_dim: int = 39
    vocab: int = 100
    mask_span: int = 5
    mask_prob: float = 0.08
    dropout: float = 0.1
    head: str = "linear"  # or "cosine"
    temperature: float = 0.1
    codeword_dim: int | None = None

    def validate(self):
        if self.n_layers < 0:
            raise ConfigError("encoder.n_layers must be >= 0")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError("encoder.d_model must be a positive multiple of n_heads")
        if self.mask_span < 1:
            raise ConfigError("encoder.mask_span must be >= 1")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError("encoder.mask_prob must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("encoder.dropout must lie in [0, 1)")
        if self.head not in ("linear", "cosine"):
            raise ConfigError(f"encoder.head must be 'linear' or 'cosine', got {self.head!r}")
        if self.vocab < 1 or self.input_dim < 1:
            raise ConfigError("encoder.vocab and encoder.input_dim must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class MaskSpec:
    indices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "indices", np.unique(np.asarray(self.indices, dtype=np.int64)))

    def __len__(self):
        return int(self.indices.size)

    def as_bool(self, T: int) -> np.ndarray:
        if self.indices.size and self.indices[-1] >= T:
            raise ShapeError(f"mask index {self.indices[-1]} out of range for T={T}")
        out = np.zeros(T, dtype=bool)
        out[self.indices] = True
        return out


def sample_mask(T: int, config: EncoderConfig, seed) -> MaskSpec:
    """Each frame starts a ``mask_span`` span with probability ``mask_prob``."""
    if T < 1:
        raise ShapeError("sample_mask needs T >= 1")
    rng = np.random.default_rng(seed)
    starts = np.flatnonzero(rng.random(T) < config.mask_prob)
    if starts.size == 0:
        return MaskSpec(np.empty(0, dtype=np.int64))
    idx = (starts[:, None] + np.arange(config.mask_span)[None, :]).ravel()
    return MaskSpec(idx[idx < T])


def sinusoidal_positions(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    table = np.zeros((T, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d // 2])
    return table


def init_params(config: EncoderConfig, seed=0, input_mean=None, input_scale=None) -> dict:
    cfg = config.validate()
    rng = np.random.default_rng(seed)
    d, f = cfg.d_model, cfg.d_ff

    def dense(n_in, n_out):
        return rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, n_out))

    p = {
        "input.mean": np.zeros(cfg.input_dim) if input_mean is None else np.asarray(input_mean, float).copy(),
        "input.scale": np.ones(cfg.input_dim) if input_scale is None else np.asarray(input_scale, float).copy(),
        "proj.W": dense(cfg.input_dim, d),
        "proj.b": np.zeros(d),
        "mask_emb": rng.normal(0.0, 1.0, d),
    }
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        for name in ("Wq", "Wk", "Wv", "Wo"):
            p[pre + "attn." + name] = dense(d, d)
        for name in ("bq", "bk", "bv", "bo"):
            p[pre + "attn." + name] = np.zeros(d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "ff.W1"] = dense(d, f)
        p[pre + "ff.b1"] = np.zeros(f)
        p[pre + "ff.W2"] = dense(f, d)
        p[pre + "ff.b2"] = np.zeros(d)
    p["final_ln.g"] = np.ones(d)
    p["final_ln.b"] = np.zeros(d)
    p.update(init_head(cfg, rng))
    return p


def init_head(config: EncoderConfig, rng) -> dict:
    d = config.d_model
    if config.head == "linear":
        return {"head.W": rng.normal(0.0, 1.0 / math.sqrt(d), (d, config.vocab)),
                "head.b": np.zeros(config.vocab)}
    e = config.codeword_dim or d
    return {"head.proj": rng.normal(0.0, 1.0 / math.sqrt(d), (d, e)),
            "head.codewords": rng.normal(0.0, 1.0, (config.vocab, e))}


def trainable(params: dict) -> list:
    return [k for k in params if k not in BUFFERS]


def check_params(params: dict, config: EncoderConfig) -> None:
    ref = init_params(config, seed=0)
    missing = set(ref) - set(params)
    if missing:
        raise ShapeError(f"parameters missing: {sorted(missing)}")
    for k, v in ref.items():
        if np.shape(params[k]) != v.shape:
            raise ShapeError(f"parameter {k}: shape {np.shape(params[k])}, expected {v.shape}")
        if not np.all(np.isfinite(params[k])):
            raise ShapeError(f"parameter {k} has non-finite entries")


# ---------------------------------------------------------------- primitives

def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _ln_bwd(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).sum(0)
    db = dy.sum(0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _gelu(u):
    th = np.tanh(GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + th), th


def _gelu_grad(u, th):
    return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3 * 0.044715 * u * u)


# ---------------------------------------------------------------- forward

@dataclass(eq=False)
class ForwardTrace:
    hidden_states: list
    final: np.ndarray
    logits: np.ndarray
    mask: np.ndarray  # bool per frame
    cache: dict = field(repr=False, default_factory=dict)

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)


def _frames_of(features):
    x = features.frames if hasattr(features, "frames") else features
    return np.asarray(x, dtype=np.float64)


def forward(params: dict, config: EncoderConfig, features, mask=None, train_mode=False,
            rng=None, n_layers=None) -> ForwardTrace:
    """Run the encoder on one sequence.

    ``n_layers`` stops after that many blocks (the head is then skipped);
    used for cheap embedding extraction.
    """
    cfg = config
    dtype = params["proj.W"].dtype
    x = _frames_of(features)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ShapeError(f"features must be T x {cfg.input_dim}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ShapeError("features contain non-finite values")
    T = x.shape[0]
    if mask is None:
        m = np.zeros(T, dtype=bool)
    elif isinstance(mask, MaskSpec):
        m = mask.as_bool(T)
    else:
        m = np.asarray(mask, dtype=bool)
    drop = cfg.dropout if train_mode else 0.0
    if drop > 0 and rng is None:
        rng = np.random.default_rng(0)

    xn = ((x - params["input.mean"]) / params["input.scale"]).astype(dtype, copy=False)
    E = xn @ params["proj.W"] + params["proj.b"]
    E[m] = params["mask_emb"]
    h = E + sinusoidal_positions(T, cfg.d_model).astype(dtype, copy=False)
    hidden = [h]
    blocks = []
    H, dh = cfg.n_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    depth = cfg.n_layers if n_layers is None else n_layers
    for l in range(depth):
        pre = f"layers.{l}."
        c = {}
        a_in, c["ln1"] = _ln_fwd(h, params[pre + "ln1.g"], params[pre + "ln1.b"])
        q = (a_in @ params[pre + "attn.Wq"] + params[pre + "attn.bq"]).reshape(T, H, dh).transpose(1, 0, 2)
        k = (a_in @ params[pre + "attn.Wk"] + params[pre + "attn.bk"]).reshape(T, H, dh).transpose(1, 0, 2)
        v = (a_in @ params[pre + "attn.Wv"] + params[pre + "attn.bv"]).reshape(T, H, dh).transpose(1, 0, 2)
        P = softmax((q @ k.transpose(0, 2, 1)) * scale)
        ctx = (P @ v).transpose(1, 0, 2).reshape(T, H * dh)
        o = ctx @ params[pre + "attn.Wo"] + params[pre + "attn.bo"]
        if drop > 0:
            c["drop1"] = ((rng.random(o.shape) >= drop) / (1.0 - drop)).astype(dtype)
            o = o * c["drop1"]
        h1 = h + o
        f_in, c["ln2"] = _ln_fwd(h1, params[pre + "ln2.g"], params[pre + "ln2.b"])
        u = f_in @ params[pre + "ff.W1"] + params[pre + "ff.b1"]
        g, th = _gelu(u)
        f = g @ params[pre + "ff.W2"] + params[pre + "ff.b2"]
        if drop > 0:
            c["drop2"] = ((rng.random(f.shape) >= drop) / (1.0 - drop)).astype(dtype)
            f = f * c["drop2"]
        h = h1 + f
        c.update(a_in=a_in, q=q, k=k, v=v, P=P, ctx=ctx, f_in=f_in, u=u, g=g, th=th)
        blocks.append(c)
        hidden.append(h)
    cache = {"xn": xn, "blocks": blocks}
    if n_layers is not None and n_layers < cfg.n_layers:
        return ForwardTrace(hidden, None, None, m, cache)
    final, cache["final_ln"] = _ln_fwd(h, params["final_ln.g"], params["final_ln.b"])
    logits = _head_fwd(params, cfg, final, cache)
    return ForwardTrace(hidden, final, logits, m, cache)


def _head_fwd(params, cfg, final, cache):
    if cfg.head == "linear":
        return final @ params["head.W"] + params["head.b"]
    z = final @ params["head.proj"]
    zn_norm = np.sqrt((z * z).sum(1, keepdims=True) + NORM_EPS)
    E = params["head.codewords"]
    en_norm = np.sqrt((E * E).sum(1, keepdims=True) + NORM_EPS)
    zn, en = z / zn_norm, E / en_norm
    cache["head"] = (zn, zn_norm, en, en_norm)
    return (zn @ en.T) / cfg.temperature


# ---------------------------------------------------------------- backward

def backward(params: dict, config: EncoderConfig, trace: ForwardTrace, d_logits=None, d_final=None) -> dict:
    """Gradients of a scalar objective w.r.t. every trainable parameter.

    Supply the upstream gradient either on the logits (through the head) or
    directly on the final layer-normed representation.
    """
    cfg = config
    grads = {}
    dfin = np.zeros_like(trace.final) if d_final is None else np.array(d_final, dtype=trace.final.dtype)
    if d_logits is not None:
        dfin += _head_bwd(params, cfg, trace, d_logits, grads)
    else:
        for k in _head_names(cfg):
            grads[k] = np.zeros_like(params[k])
    dh, grads["final_ln.g"], grads["final_ln.b"] = _ln_bwd(dfin, params["final_ln.g"], trace.cache["final_ln"])

    T = trace.final.shape[0]
    H, hd = cfg.n_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(hd)
    for l in reversed(range(cfg.n_layers)):
        pre = f"layers.{l}."
        c = trace.cache["blocks"][l]
        # feedforward sublayer
        df = dh * c["drop2"] if "drop2" in c else dh
        grads[pre + "ff.W2"] = c["g"].T @ df
        grads[pre + "ff.b2"] = df.sum(0)
        du = (df @ params[pre + "ff.W2"].T) * _gelu_grad(c["u"], c["th"])
        grads[pre + "ff.W1"] = c["f_in"].T @ du
        grads[pre + "ff.b1"] = du.sum(0)
        dfin_ln = du @ params[pre + "ff.W1"].T
        dx, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = _ln_bwd(dfin_ln, params[pre + "ln2.g"], c["ln2"])
        dh1 = dh + dx
        # attention sublayer
        do = dh1 * c["drop1"] if "drop1" in c else dh1
        grads[pre + "attn.Wo"] = c["ctx"].T @ do
        grads[pre + "attn.bo"] = do.sum(0)
        dctx = (do @ params[pre + "attn.Wo"].T).reshape(T, H, hd).transpose(1, 0, 2)
        P, q, k, v = c["P"], c["q"], c["k"], c["v"]
        dP = dctx @ v.transpose(0, 2, 1)
        dv = P.transpose(0, 2, 1) @ dctx
        dS = P * (dP - (dP * P).sum(-1, keepdims=True)) * scale
        dq = dS @ k
        dk = dS.transpose(0, 2, 1) @ q
        a_in = c["a_in"]
        da = np.zeros_like(a_in)
        for name, g in (("q", dq), ("k", dk), ("v", dv)):
            gm = g.transpose(1, 0, 2).reshape(T, H * hd)
            grads[pre + "attn.W" + name] = a_in.T @ gm
            grads[pre + "attn.b" + name] = gm.sum(0)
            da += gm @ params[pre + "attn.W" + name].T
        dx, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = _ln_bwd(da, params[pre + "ln1.g"], c["ln1"])
        dh = dh1 + dx

    m = trace.mask
    keep = ~m
    grads["mask_emb"] = dh[m].sum(0)
    grads["proj.W"] = trace.cache["xn"][keep].T @ dh[keep]
    grads["proj.b"] = dh[keep].sum(0)
    return grads


def _head_names(cfg):
    return ("head.W", "head.b") if cfg.head == "linear" else ("head.proj", "head.codewords")


def _head_bwd(params, cfg, trace, d_logits, grads):
    final = trace.final
    if cfg.head == "linear":
        grads["head.W"] = final.T @ d_logits
        grads["head.b"] = d_logits.sum(0)
        return d_logits @ params["head.W"].T
    zn, zn_norm, en, en_norm = trace.cache["head"]
    dcos = d_logits / cfg.temperature
    dzn = dcos @ en
    den = dcos.T @ zn
    dz = (dzn - zn * (dzn * zn).sum(1, keepdims=True)) / zn_norm
    grads["head.codewords"] = (den - en * (den * en).sum(1, keepdims=True)) / en_norm
    grads["head.proj"] = final.T @ dz
    return dz @ params["head.proj"].T


# ---------------------------------------------------------------- loss

class LossGrad(NamedTuple):
    loss: float
    grads: dict
    n_masked: int
    n_correct: int

    @property
    def empty_mask(self) -> bool:
        return self.n_masked == 0


def masked_cross_entropy(logits, labels, mask):
    """Mean negative log-likelihood over masked frames and its logits gradient."""
    idx = np.flatnonzero(mask)
    d = np.zeros_like(logits)
    if idx.size == 0:
        return 0.0, d, 0, 0
    lp = log_softmax(logits[idx])
    z = labels[idx]
    loss = -float(lp[np.arange(idx.size), z].mean())
    p = np.exp(lp)
    p[np.arange(idx.size), z] -= 1.0
    d[idx] = p / np.asarray(idx.size, dtype=p.dtype)
    correct = int((lp.argmax(1) == z).sum())
    return loss, d, int(idx.size), correct


def loss_and_grad(params: dict, config: EncoderConfig, trace: ForwardTrace, labels, mask=None) -> LossGrad:
    """Masked-prediction cross-entropy: -(1/|M|) sum_{t in M} log p(z_t | masked input).

    An empty mask yields loss 0 with all-zero gradients (``empty_mask``).
    """
    labels = np.asarray(getattr(labels, "labels", labels), dtype=np.int64)
    T = trace.logits.shape[0]
    if labels.shape[0] != T:
        raise ShapeError(f"{labels.shape[0]} labels for {T} frames")
    if labels.size and (labels.min() < 0 or labels.max() >= config.vocab):
        raise ShapeError(f"labels outside [0, {config.vocab})")
    m = trace.mask if mask is None else (mask.as_bool(T) if isinstance(mask, MaskSpec) else np.asarray(mask, bool))
    loss, d_logits, n, correct = masked_cross_entropy(trace.logits, labels, m)
    if n == 0:
        return LossGrad(0.0, zeros_like_grads(params), 0, 0)
    return LossGrad(loss, backward(params, config, trace, d_logits=d_logits), n, correct)


def zeros_like_grads(params: dict) -> dict:
    return {k: np.zeros_like(params[k]) for k in trainable(params)}


# ---------------------------------------------------------------- extraction

def extract_embeddings(params: dict, config: EncoderConfig, features, layer: int) -> list:
    """Eval-mode, unmasked hidden states ``H_layer`` for each sequence."""
    from .features import FeatureSequence, layer_kind

    if not 0 <= layer <= config.n_layers:
        raise ConfigError(f"layer {layer} outside [0, {config.n_layers}]")
    out = []
    for i, feat in enumerate(features):
        trace = forward(params, config, feat, mask=None, train_mode=False, n_layers=layer)
        out.append(FeatureSequence(
            utterance_id=getattr(feat, "utterance_id", str(i)),
            frames=trace.hidden_states[layer],
            frame_hop=getattr(feat, "frame_hop", 0.010),
            frame_len=getattr(feat, "frame_len", 0.025),
            kind=layer_kind(layer),
        ))
    return out
