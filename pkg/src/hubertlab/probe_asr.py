"""CTC finetuning probe: phone-level CTC loss, greedy decoding and token error rate."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .encoder import backward, forward, log_softmax, trainable
from .errors import ConfigError
from .training import AdamState, TrainConfig, adam_step, lr_at

BLANK = 0


class CtcResult(NamedTuple):
    loss: float
    grad: np.ndarray
    feasible: bool


def _expand(target):
    ext = [BLANK]
    for t in target:
        ext += [int(t), BLANK]
    return np.array(ext, dtype=np.int64)


def ctc_loss_and_grad(logits, target) -> CtcResult:
    """Negative log CTC likelihood of ``target`` and its gradient w.r.t. ``logits``.

    ``logits`` is T x (P+1) with class 0 the blank; ``target`` holds class
    ids in 1..P. Forward and backward recursions run in log space over the
    blank-interleaved target. When no alignment fits in T frames the loss is
    ``inf`` with a zero gradient and ``feasible=False``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    T, C = logits.shape
    target = np.asarray(target, dtype=np.int64)
    if target.size and (target.min() < 1 or target.max() >= C):
        raise ConfigError(f"ctc target ids must lie in [1, {C - 1}]")
    lp = log_softmax(logits)
    ext = _expand(target)
    S = ext.size
    NEG = -np.inf
    # a transition s-2 -> s is allowed onto a label that differs from the one two back
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    alpha = np.full((T, S), NEG)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        a = prev.copy()
        a[1:] = np.logaddexp(a[1:], prev[:-1])
        a[2:] = np.where(skip[2:], np.logaddexp(a[2:], prev[:-2]), a[2:])
        alpha[t] = a + lp[t, ext]
    ll = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    if not np.isfinite(ll):
        return CtcResult(math.inf, np.zeros_like(logits), False)

    # beta[t, s]: log prob of emitting frames t+1.. given state s at t
    beta = np.full((T, S), NEG)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1, ext]
        b = nxt.copy()
        b[:-1] = np.logaddexp(b[:-1], nxt[1:])
        b[:-2] = np.where(skip[2:], np.logaddexp(b[:-2], nxt[2:]), b[:-2])
        beta[t] = b
    occ = np.exp(alpha + beta - ll)  # state occupancy per frame
    gamma = np.zeros((T, C))
    for s in range(S):
        gamma[:, ext[s]] += occ[:, s]
    grad = np.exp(lp) - gamma
    return CtcResult(float(-ll), grad, True)


def greedy_decode(logits) -> list:
    """Per-frame argmax, merge repeats, drop blanks."""
    best = np.asarray(logits).argmax(1)
    out, last = [], None
    for b in best:
        b = int(b)
        if b != last and b != BLANK:
            out.append(b)
        last = b
    return out


class EditCounts(NamedTuple):
    substitutions: int
    insertions: int
    deletions: int
    distance: int


def edit_distance(hyp, ref) -> EditCounts:
    """Unit-cost Levenshtein alignment of ``hyp`` against ``ref``.

    Insertions are extra ``hyp`` tokens, deletions are missing ``ref``
    tokens. The backtrace prefers substitution (or match), then deletion,
    then insertion.
    """
    hyp, ref = list(hyp), list(ref)
    n, m = len(hyp), len(ref)
    D = np.zeros((n + 1, m + 1), dtype=np.int64)
    D[:, 0] = np.arange(n + 1)
    D[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i, j] = min(D[i - 1, j - 1] + (hyp[i - 1] != ref[j - 1]), D[i, j - 1] + 1, D[i - 1, j] + 1)
    i, j = n, m
    S = I = Dl = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and D[i, j] == D[i - 1, j - 1] + (hyp[i - 1] != ref[j - 1]):
            S += int(hyp[i - 1] != ref[j - 1])
            i, j = i - 1, j - 1
        elif j > 0 and D[i, j] == D[i, j - 1] + 1:
            Dl += 1
            j -= 1
        else:
            I += 1
            i -= 1
    return EditCounts(S, I, Dl, int(D[n, m]))


@dataclass
class ErrorRateReport:
    tag: str
    step: int
    strategy: str
    substitutions: int
    insertions: int
    deletions: int
    ref_length: int
    diverged: bool = False

    @property
    def edits(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def token_error_rate(self) -> float:
        if self.diverged:
            return 1.0
        return self.edits / self.ref_length if self.ref_length else 0.0

    def row(self) -> dict:
        return {"checkpoint": self.tag, "step": self.step, "strategy": self.strategy,
                "token_error_rate": self.token_error_rate, "S": self.substitutions,
                "I": self.insertions, "D": self.deletions}


@dataclass(frozen=True)
class FinetuneConfig:
    scope: str = "head_only"  # or "full"
    steps: int = 300
    lr: float = 5e-3
    batch_size: int = 4
    seed: int = 0
    compute_dtype: str = "float32"
    freeze_steps: int = 0  # full scope only: head-only updates before unfreezing the encoder

    def validate(self):
        if self.scope not in ("head_only", "full"):
            raise ConfigError(f"finetune scope must be 'head_only' or 'full', got {self.scope!r}")
        if self.steps < 1:
            raise ConfigError("finetune steps must be >= 1")
        if self.freeze_steps < 0:
            raise ConfigError("finetune freeze_steps must be >= 0")
        return self


def phone_targets(utterance) -> list:
    """CTC class ids (phone id + 1) in utterance order."""
    return [p + 1 for p in utterance.phones]


def init_ctc_head(d_model: int, n_phones: int, seed=0) -> dict:
    rng = np.random.default_rng([seed, 606])
    return {"ctc.W": rng.normal(0.0, 1.0 / math.sqrt(d_model), (d_model, n_phones + 1)),
            "ctc.b": np.zeros(n_phones + 1)}


def ctc_head_loss_and_grad(params, enc, head, features, target, with_encoder=False):
    """CTC on top of the encoder's final representation; grads for the head (and encoder)."""
    trace = forward(params, enc, features)
    z = trace.final @ head["ctc.W"] + head["ctc.b"]
    res = ctc_loss_and_grad(z, target)
    grads = {"ctc.W": trace.final.T @ res.grad, "ctc.b": res.grad.sum(0)}
    if with_encoder:
        d_final = (res.grad @ head["ctc.W"].T).astype(trace.final.dtype)
        grads.update(backward(params, enc, trace, d_final=d_final))
    return res.loss, grads, res.feasible


class CtcProbe:
    """Linear CTC head over a (frozen or finetuned) pretrained encoder."""

    def __init__(self, params, enc, n_phones, config: FinetuneConfig | None = None):
        self.enc = enc
        self.n_phones = n_phones
        self.config = (config or FinetuneConfig()).validate()
        self.params = {k: v.copy() for k, v in params.items()}
        self.head = init_ctc_head(enc.d_model, n_phones, self.config.seed)
        self.diverged = False

    def _compute_params(self):
        dt = self.config.compute_dtype
        return {k: v.astype(dt, copy=False) for k, v in self.params.items()}

    def _final(self, feats):
        pc = self._compute_params()
        return [forward(pc, self.enc, f).final.astype(np.float64) for f in feats]

    def fit(self, features, targets):
        cfg = self.config
        full = cfg.scope == "full"
        tcfg = TrainConfig(total_steps=cfg.steps, peak_lr=cfg.lr, weight_decay=0.0, warmup_fraction=0.1)
        var = dict(self.head)
        if full:
            var.update({k: self.params[k] for k in trainable(self.params)
                        if not k.startswith("head.")})
        state = AdamState.zeros(var)
        cached = None
        order_rng = np.random.default_rng([cfg.seed, 707])
        n = len(features)
        for step in range(1, cfg.steps + 1):
            batch = order_rng.choice(n, size=min(cfg.batch_size, n), replace=False)
            # the encoder stays frozen for the first freeze_steps updates
            frozen = not full or step <= cfg.freeze_steps
            if frozen and cached is None:
                cached = self._final(features)
            names = ("ctc.W", "ctc.b") if frozen else tuple(var)
            acc = {k: np.zeros_like(var[k]) for k in names}
            used = 0
            pc = None if frozen else self._compute_params()
            for i in batch:
                if frozen:
                    Z = cached[i]
                    res = ctc_loss_and_grad(Z @ self.head["ctc.W"] + self.head["ctc.b"], targets[i])
                    ok = res.feasible
                    g = {"ctc.W": Z.T @ res.grad, "ctc.b": res.grad.sum(0)}
                else:
                    _, g, ok = ctc_head_loss_and_grad(pc, self.enc, self.head,
                                                      features[i], targets[i], with_encoder=True)
                if not ok:
                    continue
                used += 1
                for k in acc:
                    acc[k] += g[k]
            if not used:
                continue
            grads = {k: v / used for k, v in acc.items()}
            var, state, _ = adam_step(var, grads, state, lr_at(step, tcfg), tcfg)
            if not all(np.all(np.isfinite(var[k])) for k in names):
                self.diverged = True
                break
        return self

    def logits(self, features):
        Z = self._final(features)
        return [z @ self.head["ctc.W"] + self.head["ctc.b"] for z in Z]

    def predict(self, features):
        return [greedy_decode(l) for l in self.logits(features)]


def score_decodes(hyps, refs, tag="", step=0, strategy="", diverged=False) -> ErrorRateReport:
    S = I = D = n = 0
    for h, r in zip(hyps, refs):
        c = edit_distance(h, r)
        S, I, D, n = S + c.substitutions, I + c.insertions, D + c.deletions, n + len(r)
    return ErrorRateReport(tag, step, strategy, S, I, D, n, diverged)


def finetune_and_score(params, enc, train_utts, train_feats, test_utts, test_feats, n_phones,
                       config: FinetuneConfig | None = None, tag="", step=0, strategy="") -> ErrorRateReport:
    """Attach a CTC head, finetune on the train split, greedy-decode the test split."""
    train_ids = {u.id for u in train_utts}
    if any(u.id in train_ids for u in test_utts):
        raise ConfigError("finetune_and_score: train and test splits overlap")
    probe = CtcProbe(params, enc, n_phones, config)
    probe.fit(list(train_feats), [phone_targets(u) for u in train_utts])
    refs = [phone_targets(u) for u in test_utts]
    if probe.diverged:
        return ErrorRateReport(tag, step, strategy, 0, 0, 0, sum(len(r) for r in refs), diverged=True)
    return score_decodes(probe.predict(test_feats), refs, tag, step, strategy)
