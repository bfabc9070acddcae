"""Iteration plans (Original / Uniform / Progressive / Progressive+Cluster) and their execution.

A plan fixes, for every iteration, how many optimizer steps it gets, which
teacher features feed its clustering (MFCC first, then a layer of the
previous iteration's model) and how many clusters it uses.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .clustering import Codebook, StreamingKMeans, assign
from .encoder import EncoderConfig, extract_embeddings, init_head, init_params
from .errors import ConfigError, DivergenceError
from .features import layer_kind
from .tensorio import atomic_write_text
from .training import (
    TrainConfig,
    TrainLog,
    feature_stats,
    load_checkpoint,
    pretrain_iteration,
    save_checkpoint,
)

log = logging.getLogger(__name__)

STRATEGIES = ("original", "uniform", "progressive", "progressive_cluster")
DEFAULT_MIN_STEPS = 200
PAPER_MIN_STEPS = 12000  # smallest iteration observed to converge at full scale
BASE_LAYER = 6


def round_half_up(x) -> int:
    return int(math.floor(Fraction(x) + Fraction(1, 2)))


@dataclass(frozen=True)
class IterationSpec:
    index: int
    steps: int
    supervision: str  # "mfcc" or "layer:<l>"
    k: int
    warm_start: bool = False

    @property
    def layer(self):
        return None if self.supervision == "mfcc" else int(self.supervision.split(":")[1])

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class IterationPlan:
    strategy: str
    total_budget: int
    specs: tuple
    min_steps: int = DEFAULT_MIN_STEPS

    @property
    def N(self) -> int:
        return len(self.specs)

    def validate(self):
        if sum(s.steps for s in self.specs) != self.total_budget:
            raise ConfigError("plan: iteration steps do not sum to the total budget")
        for s in self.specs:
            if s.steps < self.min_steps:
                raise ConfigError(f"plan: iteration {s.index} has {s.steps} < min_steps={self.min_steps}")
            if s.k < 2:
                raise ConfigError(f"plan: iteration {s.index} needs k >= 2")
            if (s.index == 1) != (s.supervision == "mfcc"):
                raise ConfigError("plan: MFCC supervision is used exactly for iteration 1")
        return self

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "N": self.N, "total_budget": self.total_budget,
                "min_steps": self.min_steps, "specs": [s.to_dict() for s in self.specs]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> "IterationPlan":
        specs = tuple(IterationSpec(**s) for s in doc["specs"])
        if "N" in doc and doc["N"] != len(specs):
            raise ConfigError(f"plan: N={doc['N']} but {len(specs)} specs listed")
        return cls(doc["strategy"], int(doc["total_budget"]), specs,
                   int(doc.get("min_steps", DEFAULT_MIN_STEPS))).validate()


# ---------------------------------------------------------------- allocation rules

def _check_budget(total_budget, N, min_steps):
    if N < 1:
        raise ConfigError("plan: N must be >= 1")
    if min_steps < 0:
        raise ConfigError("plan: min_steps must be >= 0")
    if total_budget < N * min_steps:
        raise ConfigError(f"plan: budget {total_budget} < N * min_steps = {N * min_steps}")


def uniform_steps(total_budget: int, N: int, min_steps: int = 0) -> list:
    _check_budget(total_budget, N, min_steps)
    base = total_budget // N
    steps = [base] * N
    steps[-1] += total_budget - base * N
    return steps


def linear_steps(total_budget: int, N: int, min_steps: int = 0) -> list:
    """Steps proportional to the iteration index, summing exactly to the budget.

    ``max(min_steps, round(budget * i / sum(1..N)))``; a rounding deficit goes
    to the last iteration. A surplus (caused by the floor) is shaved from the
    top: the largest entries are capped at a common level, which keeps the
    sequence nondecreasing and every entry >= min_steps.
    """
    _check_budget(total_budget, N, min_steps)
    tri = N * (N + 1) // 2
    steps = [max(min_steps, round_half_up(Fraction(total_budget * i, tri))) for i in range(1, N + 1)]
    diff = total_budget - sum(steps)
    if diff >= 0:
        steps[-1] += diff
        return steps
    # smallest cap c with sum(min(s, c)) >= budget: binary search
    lo, hi = min_steps, steps[-1]
    while lo < hi:
        mid = (lo + hi) // 2
        if sum(min(s, mid) for s in steps) >= total_budget:
            hi = mid
        else:
            lo = mid + 1
    steps = [min(s, lo) for s in steps]
    extra = sum(steps) - total_budget
    first_top = steps.index(lo)
    for j in range(first_top, first_top + extra):
        steps[j] -= 1
    return steps


def layer_schedule(N: int, layer_max: int, base_layer: int = BASE_LAYER) -> list:
    """Supervision of each iteration: MFCC, then ``base_layer``, then linear up to ``layer_max``."""
    out = []
    for i in range(1, N + 1):
        if i == 1:
            out.append("mfcc")
        elif i == 2 or N == 2:
            out.append(layer_kind(base_layer))
        else:
            h = Fraction(base_layer) + Fraction((layer_max - base_layer) * (i - 2), N - 2)
            out.append(layer_kind(round_half_up(h)))
    return out


def cluster_schedule(N: int, k_start: int, k_end: int) -> list:
    if k_start > k_end:
        raise ConfigError("plan: k_start must be <= k_end")
    if N == 1:
        if k_start != k_end:
            raise ConfigError("plan: a single iteration cannot interpolate k_start != k_end")
        return [k_start]
    return [round_half_up(k_start + Fraction((k_end - k_start) * (i - 1), N - 1)) for i in range(1, N + 1)]


def _check_layers(layer_max, base_layer, n_layers):
    if layer_max < base_layer:
        raise ConfigError(f"plan: layer_max={layer_max} is below the base supervision layer {base_layer}")
    if n_layers is not None and layer_max > n_layers:
        raise ConfigError(f"plan: layer_max={layer_max} exceeds the encoder depth {n_layers}")


def _specs(steps, supervision, ks, warm_start):
    return tuple(IterationSpec(i + 1, int(s), sup, int(k), bool(warm_start and i > 0))
                 for i, (s, sup, k) in enumerate(zip(steps, supervision, ks)))


def plan_original(total_budget: int, k1: int = 100, k2: int = 500, split_fraction: float = 1 / 3,
                  min_steps: int = DEFAULT_MIN_STEPS, base_layer: int = BASE_LAYER,
                  n_layers: int | None = None, warm_start: bool = False) -> IterationPlan:
    """Two iterations: MFCC then ``base_layer``; the first gets ``floor(budget * split)`` steps."""
    if not 0.0 < split_fraction < 0.5:
        raise ConfigError("plan_original: split_fraction must lie in (0, 0.5) so iteration 2 is longer")
    if total_budget < 2 * min_steps:
        raise ConfigError(f"plan_original: budget {total_budget} < 2 * min_steps")
    if n_layers is not None and base_layer > n_layers:
        raise ConfigError(f"plan_original: layer {base_layer} exceeds the encoder depth {n_layers}")
    first = max(min_steps, int(math.floor(Fraction(total_budget) * Fraction(split_fraction))))
    steps = [first, total_budget - first]
    return IterationPlan("original", total_budget,
                         _specs(steps, ["mfcc", layer_kind(base_layer)], [k1, k2], warm_start),
                         min_steps).validate()


def plan_uniform(total_budget: int, N: int, k: int = 100, layer_max: int | None = None,
                 min_steps: int = DEFAULT_MIN_STEPS, base_layer: int = BASE_LAYER,
                 n_layers: int | None = None, warm_start: bool = False) -> IterationPlan:
    """Equal steps per iteration (remainder on the last); Progressive layer heights."""
    steps = uniform_steps(total_budget, N, min_steps)
    layer_max = base_layer if layer_max is None else layer_max
    if N > 1:
        _check_layers(layer_max, base_layer, n_layers)
    return IterationPlan("uniform", total_budget,
                         _specs(steps, layer_schedule(N, layer_max, base_layer), [k] * N, warm_start),
                         min_steps).validate()


def plan_progressive(total_budget: int, N: int, k: int = 100, layer_max: int = 11,
                     min_steps: int = DEFAULT_MIN_STEPS, base_layer: int = BASE_LAYER,
                     n_layers: int | None = None, warm_start: bool = False,
                     direction: str = "increasing") -> IterationPlan:
    """Linearly growing iterations and supervision height, constant k.

    ``direction="decreasing"`` reverses the step allocation (the longest
    iteration first); it is an experiment knob, not a named strategy.
    """
    return _progressive("progressive", total_budget, N, [k] * N, layer_max, min_steps,
                        base_layer, n_layers, warm_start, direction)


def plan_progressive_cluster(total_budget: int, N: int, k_start: int = 100, k_end: int = 500,
                             layer_max: int = 11, min_steps: int = DEFAULT_MIN_STEPS,
                             base_layer: int = BASE_LAYER, n_layers: int | None = None,
                             warm_start: bool = False, direction: str = "increasing") -> IterationPlan:
    """Progressive plus a linear ramp of the cluster count from ``k_start`` to ``k_end``."""
    ks = cluster_schedule(N, k_start, k_end)
    return _progressive("progressive_cluster", total_budget, N, ks, layer_max, min_steps,
                        base_layer, n_layers, warm_start, direction)


def _progressive(name, total_budget, N, ks, layer_max, min_steps, base_layer, n_layers, warm_start, direction):
    _check_layers(layer_max, base_layer, n_layers)
    steps = linear_steps(total_budget, N, min_steps)
    if direction == "decreasing":
        steps = steps[::-1]
    elif direction != "increasing":
        raise ConfigError(f"plan: direction must be 'increasing' or 'decreasing', got {direction!r}")
    return IterationPlan(name, total_budget,
                         _specs(steps, layer_schedule(N, layer_max, base_layer), ks, warm_start),
                         min_steps).validate()


def make_plan(strategy: str, total_budget: int, N: int = 10, k: int = 100, k_end: int = 500,
              layer_max: int | None = None, min_steps: int = DEFAULT_MIN_STEPS,
              base_layer: int = BASE_LAYER, n_layers: int | None = None, split_fraction: float = 1 / 3,
              k2: int = 500, warm_start: bool = False, direction: str = "increasing") -> IterationPlan:
    """Dispatch on a strategy name; ``layer_max`` defaults to ``n_layers - 1`` (or ``base_layer``)."""
    if layer_max is None:
        layer_max = max(base_layer, n_layers - 1) if n_layers is not None else base_layer
    if strategy == "original":
        return plan_original(total_budget, k, k2, split_fraction, min_steps, base_layer, n_layers, warm_start)
    if strategy == "uniform":
        return plan_uniform(total_budget, N, k, layer_max, min_steps, base_layer, n_layers, warm_start)
    if strategy == "progressive":
        return plan_progressive(total_budget, N, k, layer_max, min_steps, base_layer, n_layers,
                                warm_start, direction)
    if strategy == "progressive_cluster":
        return plan_progressive_cluster(total_budget, N, k, k_end, layer_max, min_steps, base_layer,
                                        n_layers, warm_start, direction)
    raise ConfigError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")


# ---------------------------------------------------------------- execution

@dataclass(frozen=True)
class ClusterConfig:
    batch_size: int = 1024
    n_passes: int = 3
    init_size: int = 4096
    repair_threshold: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class IterationResult:
    spec: IterationSpec
    params: dict
    codebook: Codebook
    log: TrainLog
    checkpoint: str | None = None


@dataclass
class PlanResult:
    params: dict | None
    iterations: list = field(default_factory=list)
    divergence: dict | None = None

    @property
    def diverged(self) -> bool:
        return self.divergence is not None

    @property
    def logs(self):
        return [it.log for it in self.iterations]


def _iteration_seed(seed, index):
    return int(seed) * 1000 + index


def run_plan(plan: IterationPlan, features, encoder_config: EncoderConfig, train_config: TrainConfig,
             cluster_config: ClusterConfig | None = None, out_dir=None, resume: bool = False,
             seed: int = 0) -> PlanResult:
    """Execute the plan: teacher features -> k-means -> pretraining, once per iteration.

    ``features`` are the MFCC sequences of the corpus (iteration 1's teacher
    and every iteration's model input). With ``out_dir``, each iteration
    writes ``checkpoints/iterNN``, ``codebooks/iterNN.tnsr`` and
    ``logs/iterNN.csv``; ``resume`` reloads iterations whose checkpoint
    exists instead of recomputing them. Divergence stops the plan and is
    returned in ``PlanResult.divergence``.
    """
    plan.validate()
    ccfg = cluster_config or ClusterConfig()
    mean, scale = feature_stats(features)
    out = Path(out_dir) if out_dir is not None else None
    result = PlanResult(params=None)
    prev = None
    for spec in plan.specs:
        iseed = _iteration_seed(seed, spec.index)
        enc = replace(encoder_config, vocab=spec.k).validate()
        tag = f"iter{spec.index:02d}"
        ckpt = out / "checkpoints" / tag if out is not None else None
        if resume and ckpt is not None and (ckpt / "manifest.json").exists():
            params, _, _ = load_checkpoint(ckpt)
            codebook = Codebook.load(out / "codebooks" / f"{tag}.tnsr")
            logp = out / "logs" / f"{tag}.csv"
            tlog = TrainLog.read_csv(logp) if logp.exists() else TrainLog()
            log.info("resume: %s already complete", tag)
            result.iterations.append(IterationResult(spec, params, codebook, tlog, str(ckpt)))
            prev = params
            continue

        if spec.layer is None:
            teacher = features
        else:
            if prev is None:
                raise ConfigError(f"iteration {spec.index}: layer supervision needs a previous model")
            if spec.layer > encoder_config.n_layers:
                raise ConfigError(f"iteration {spec.index}: layer {spec.layer} > encoder depth")
            teacher = extract_embeddings(prev, encoder_config, features, spec.layer)
        km = StreamingKMeans(n_clusters=spec.k, batch_size=ccfg.batch_size, n_passes=ccfg.n_passes,
                             init_size=ccfg.init_size, repair_threshold=ccfg.repair_threshold,
                             random_state=iseed, kind=spec.supervision).fit(teacher)
        labels = [assign(km.codebook_, t) for t in teacher]

        if spec.warm_start and prev is not None:
            init = {k: v.copy() for k, v in prev.items()}
            if init["head.W" if enc.head == "linear" else "head.codewords"].shape[-1 if enc.head == "linear" else 0] != spec.k:
                for k in [n for n in init if n.startswith("head.")]:
                    del init[k]
                init.update(init_head(enc, np.random.default_rng(iseed)))
        else:
            init = init_params(enc, seed=iseed, input_mean=mean, input_scale=scale)

        tcfg = replace(train_config, total_steps=spec.steps, seed=iseed)
        try:
            params, tlog = pretrain_iteration(init, enc, features, labels, tcfg,
                                              checkpoint_dir=None if ckpt is None else ckpt.parent / f"{tag}_steps",
                                              iteration=spec.index)
        except DivergenceError as exc:
            result.divergence = dict(exc.report, iteration=spec.index)
            if out is not None and exc.log is not None:
                exc.log.write_csv(out / "logs" / f"{tag}.csv")
            log.warning("plan halted: %s", exc)
            break
        if out is not None:
            save_checkpoint(ckpt, params, enc, step=spec.steps, iteration=spec.index,
                            extra={"supervision": spec.supervision, "strategy": plan.strategy})
            km.codebook_.save(out / "codebooks" / f"{tag}.tnsr")
            tlog.write_csv(out / "logs" / f"{tag}.csv")
        result.iterations.append(IterationResult(spec, params, km.codebook_, tlog,
                                                 None if ckpt is None else str(ckpt)))
        prev = params
    result.params = prev
    return result


def write_plan(path, plan: IterationPlan) -> None:
    atomic_write_text(Path(path), plan.to_json())


def read_plan(path) -> IterationPlan:
    return IterationPlan.from_dict(json.loads(Path(path).read_text()))
