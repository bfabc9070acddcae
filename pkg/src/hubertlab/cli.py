"""Command-line experiment driver.

Subcommands: ``corpus``, ``plan``, ``train``, ``analyze``, ``probe``, ``compare``.
A run directory holds ``config.json``, ``plan.json``, ``logs/``,
``checkpoints/``, ``codebooks/`` and ``reports/``. Every report is written
to a temporary file and renamed into place.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .analysis import REFERENCE_KINDS, layerwise_probe, layerwise_report
from .corpus import CorpusConfig, Lexicon, build_corpus, read_manifest, write_manifest
from .encoder import EncoderConfig, init_params
from .errors import ConfigError, DivergenceError, HubertLabError, IngestionError
from .features import MfccConfig, mfcc
from .probe_asr import FinetuneConfig, finetune_and_score
from .scheduler import STRATEGIES, ClusterConfig, make_plan, read_plan, run_plan, write_plan
from .tensorio import atomic_write_text
from .training import TrainConfig, feature_stats, load_checkpoint

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4
RUN_SUBDIRS = ("logs", "checkpoints", "codebooks", "reports")


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class PlanConfig:
    strategy: str = "original"
    budget: int = 2000
    n: int = 2
    k: int = 100
    k_end: int = 500
    k2: int = 500
    layer_max: int | None = None
    base_layer: int | None = None  # defaults to the encoder's middle layer
    min_steps: int = 200
    split_fraction: float = 1 / 3
    warm_start: bool = False
    direction: str = "increasing"

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"plan.strategy: unknown {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if self.budget < 1 or self.n < 1:
            raise ConfigError("plan: budget and n must be >= 1")
        return self


@dataclass(frozen=True)
class AnalysisConfig:
    kinds: tuple = ("word-onehot", "phone-onehot", "agwe-standin", "glove-standin", "layer0")
    cap: int = 5000

    def validate(self):
        for k in self.kinds:
            if k not in REFERENCE_KINDS:
                raise ConfigError(f"analysis.kinds: unknown {k!r}")
        return self


@dataclass(frozen=True)
class ProbeConfig:
    scope: str = "head_only"
    steps: int = 300
    lr: float = 5e-3
    batch_size: int = 4
    train_fraction: float = 0.75
    probe_epochs: int = 300
    probe_lr: float = 0.5
    freeze_steps: int = 0

    def validate(self):
        self.finetune(0).validate()
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("probe.train_fraction must lie in (0, 1)")
        return self

    def finetune(self, seed):
        return FinetuneConfig(self.scope, self.steps, self.lr, self.batch_size, seed,
                              freeze_steps=self.freeze_steps)


_SECTIONS = {"corpus": CorpusConfig, "features": MfccConfig, "encoder": EncoderConfig,
             "train": TrainConfig, "plan": PlanConfig, "cluster": ClusterConfig,
             "analysis": AnalysisConfig, "probe": ProbeConfig}


def _build(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kw = {}
    for k, v in doc.items():
        if isinstance(v, list) and isinstance(known[k].default, tuple):
            v = tuple(v)
        kw[k] = v
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    features: MfccConfig = field(default_factory=MfccConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    seed: int = 0
    out: str | None = None

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config: expected a JSON object")
        unknown = sorted(set(doc) - set(_SECTIONS) - {"seed", "out"})
        if unknown:
            raise ConfigError(f"config: unknown key(s) {', '.join(unknown)}")
        kw = {name: _build(kind, doc[name], name) for name, kind in _SECTIONS.items() if name in doc}
        for k in ("seed", "out"):
            if k in doc:
                kw[k] = doc[k]
        return cls(**kw).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
        return cls.from_dict(doc)

    def validate(self):
        self.corpus.validate()
        self.encoder.validate()
        self.train.validate()
        self.plan.validate()
        self.analysis.validate()
        self.probe.validate()
        n_in = 3 * self.features.n_ceps
        if self.encoder.input_dim != n_in:
            raise ConfigError(f"encoder.input_dim={self.encoder.input_dim} but features produce {n_in} dims")
        self.make_plan()
        return self

    def make_plan(self):
        p = self.plan
        base = p.base_layer if p.base_layer is not None else max(1, self.encoder.n_layers // 2)
        return make_plan(p.strategy, p.budget, p.n, k=p.k, k_end=p.k_end, layer_max=p.layer_max,
                         min_steps=p.min_steps, base_layer=base, n_layers=self.encoder.n_layers,
                         split_fraction=p.split_fraction, k2=p.k2, warm_start=p.warm_start,
                         direction=p.direction)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


# ---------------------------------------------------------------- run directory

@contextlib.contextmanager
def run_lock(run_dir: Path):
    """Exclusive lockfile for the run directory; released on exit."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OSError(f"run directory {run_dir} is locked ({lock} exists)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield run_dir
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock.unlink()


def prepare_run_dir(run_dir: Path) -> None:
    for sub in RUN_SUBDIRS:
        (run_dir / sub).mkdir(parents=True, exist_ok=True)


def write_csv(path, header, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if r[h] is None else (repr(r[h]) if isinstance(r[h], float) else r[h]) for h in header])
    atomic_write_text(path, buf.getvalue())
    return Path(path)


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- data plumbing

def _manifest_path(args, run_dir):
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    if run_dir is not None and (run_dir / "corpus" / "manifest.json").exists():
        return run_dir / "corpus" / "manifest.json"
    return None


def load_corpus(cfg: ExperimentConfig, manifest=None):
    """(utterances, lexicon or None, n_phones) from a manifest or the synthesizer."""
    if manifest is None:
        _, lexicon, utts = build_corpus(cfg.corpus)
        return utts, lexicon, cfg.corpus.n_phones
    utts = read_manifest(manifest)
    doc = json.loads(Path(manifest).read_text())
    lexicon = Lexicon(tuple(tuple(w) for w in doc["lexicon"])) if "lexicon" in doc else None
    n_phones = doc.get("n_phones") or 1 + max((p for u in utts for p in u.phones), default=0)
    return utts, lexicon, int(n_phones)


def compute_features(cfg: ExperimentConfig, utts):
    return [mfcc(u, cfg.features) for u in utts]


def _checkpoints(run_dir: Path, only=None):
    root = run_dir / "checkpoints"
    found = sorted(p for p in root.glob("iter*") if (p / "manifest.json").exists()) if root.exists() else []
    if only:
        found = [p for p in found if p.name in set(only)]
    if not found:
        raise OSError(f"no checkpoints under {root}")
    return found


def _resolve(args) -> tuple:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = args.out or cfg.out
    if out is not None:
        cfg = replace(cfg, out=str(out))
    return cfg, (Path(out) if out is not None else None)


def _require_out(run_dir):
    if run_dir is None:
        raise ConfigError("--out (or config 'out') is required for this command")
    return run_dir


# ---------------------------------------------------------------- commands

def cmd_corpus(args) -> Path:
    cfg, run_dir = _resolve(args)
    run_dir = _require_out(run_dir)
    inv, lexicon, utts = build_corpus(cfg.corpus)
    with run_lock(run_dir):
        cdir = run_dir / "corpus"
        path = write_manifest(cdir / "manifest.json", utts, wav_dir=cdir / "wav",
                              extra={"n_phones": inv.n_phones, "lexicon": [list(w) for w in lexicon.words],
                                     "corpus": cfg.to_dict()["corpus"]})
    print(path)
    return path


def _plan_from_args(cfg, args):
    over = {k: v for k, v in (("strategy", args.strategy), ("budget", args.budget), ("n", args.n),
                              ("min_steps", args.min_steps), ("k", args.k), ("k_end", args.k_end),
                              ("layer_max", args.layer_max), ("base_layer", args.base_layer))
            if v is not None}
    if over:
        cfg = replace(cfg, plan=replace(cfg.plan, **over).validate())
    return cfg, cfg.make_plan().validate()


def cmd_plan(args) -> str:
    cfg, run_dir = _resolve(args)
    cfg, plan = _plan_from_args(cfg, args)
    text = plan.to_json()
    if run_dir is not None:
        with run_lock(run_dir):
            write_plan(run_dir / "plan.json", plan)
    print(text)
    return text


def cmd_train(args) -> Path:
    cfg, run_dir = _resolve(args)
    run_dir = _require_out(run_dir)
    cfg, plan = _plan_from_args(cfg, args)
    with run_lock(run_dir):
        prepare_run_dir(run_dir)
        if args.resume and (run_dir / "config.json").exists():
            old = json.loads((run_dir / "config.json").read_text())
            if old != cfg.to_dict():
                raise ConfigError("--resume: config differs from the one recorded in the run directory")
        atomic_write_text(run_dir / "config.json", json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
        write_plan(run_dir / "plan.json", plan)
        utts, _, _ = load_corpus(cfg, _manifest_path(args, run_dir))
        feats = compute_features(cfg, utts)
        result = run_plan(plan, feats, cfg.encoder, cfg.train, cfg.cluster, out_dir=run_dir,
                          resume=args.resume, seed=cfg.seed)
        if result.diverged:
            d = result.divergence
            raise DivergenceError(f"iteration {d.get('iteration')} diverged at step {d.get('step')}", d)
    print(run_dir)
    return run_dir


def _load_run_config(run_dir: Path, args) -> ExperimentConfig:
    if args.config:
        cfg, _ = _resolve(args)
        return cfg
    path = run_dir / "config.json"
    if not path.exists():
        raise OSError(f"{path} not found; run 'train' first or pass --config")
    cfg = ExperimentConfig.load(path)
    return replace(cfg, seed=args.seed) if args.seed is not None else cfg


def cmd_analyze(args) -> Path:
    _, run_dir = _resolve(args)
    run_dir = _require_out(run_dir)
    cfg = _load_run_config(run_dir, args)
    kinds = tuple(args.kinds) if args.kinds else cfg.analysis.kinds
    AnalysisConfig(kinds, cfg.analysis.cap).validate()
    utts, lexicon, n_phones = load_corpus(cfg, _manifest_path(args, run_dir))
    if lexicon is None:
        kinds = tuple(k for k in kinds if k != "agwe-standin")
    feats = compute_features(cfg, utts)
    rows = []
    with run_lock(run_dir):
        for ckpt in _checkpoints(run_dir, args.checkpoint):
            params, enc, man = load_checkpoint(ckpt)
            rep = layerwise_report(params, enc, utts, feats, kinds, lexicon, n_phones, cap=cfg.analysis.cap,
                                   seed=cfg.seed, tag=ckpt.name, iteration=man["iteration"], step=man["step"])
            for (layer, kind), msg in rep.errors.items():
                log.warning("%s layer %d %s: %s", ckpt.name, layer, kind, msg)
            rows.extend(rep.rows())
        path = write_csv(run_dir / "reports" / "similarity.csv",
                         ["checkpoint", "iteration", "step", "layer", "reference", "score"], rows)
    print(path)
    return path


def _split(n, fraction, seed):
    order = np.random.default_rng([seed, 808]).permutation(n)
    cut = min(max(1, int(round(fraction * n))), n - 1)
    return np.sort(order[:cut]), np.sort(order[cut:])


def cmd_probe(args) -> Path:
    _, run_dir = _resolve(args)
    run_dir = _require_out(run_dir)
    cfg = _load_run_config(run_dir, args)
    pc = cfg.probe
    strategy = json.loads((run_dir / "plan.json").read_text())["strategy"] if (run_dir / "plan.json").exists() else ""
    utts, _, n_phones = load_corpus(cfg, _manifest_path(args, run_dir))
    feats = compute_features(cfg, utts)
    tr, te = _split(len(utts), pc.train_fraction, cfg.seed)
    labels = [u.label for u in utts]
    err_rows = []
    with run_lock(run_dir):
        ckpts = _checkpoints(run_dir, args.checkpoint)
        targets = [(c.name, *load_checkpoint(c)) for c in ckpts]
        if not args.no_baseline:
            _, enc0, _ = targets[0][1:]
            mean, scale = feature_stats(feats)
            p0 = init_params(enc0, cfg.seed, mean, scale)
            targets.insert(0, ("random-init", p0, enc0, {"step": 0}))
        for tag, params, enc, man in targets:
            if tag != "random-init" and None not in labels:
                acc = layerwise_probe(params, enc, feats, labels, tr, te, cfg.corpus.n_classes,
                                      pc.probe_epochs, pc.probe_lr)
                write_csv(run_dir / "reports" / f"probe_{tag}.csv", ["layer", "task", "accuracy"],
                          [{"layer": l, "task": "utterance-class", "accuracy": a} for l, a in acc.items()])
            rep = finetune_and_score(params, enc, [utts[i] for i in tr], [feats[i] for i in tr],
                                     [utts[i] for i in te], [feats[i] for i in te], n_phones,
                                     pc.finetune(cfg.seed), tag=tag, step=int(man["step"]), strategy=strategy)
            err_rows.append(rep.row())
        path = write_csv(run_dir / "reports" / "error_rate.csv",
                         ["checkpoint", "step", "strategy", "token_error_rate", "S", "I", "D"], err_rows)
    print(path)
    return path


def cmd_compare(args) -> Path:
    out = Path(args.out) if args.out else None
    out = _require_out(out)
    rows = []
    for rd in map(Path, args.runs):
        plan = read_plan(rd / "plan.json")
        sim = read_csv(rd / "reports" / "similarity.csv") if (rd / "reports" / "similarity.csv").exists() else []
        err = {r["checkpoint"]: r for r in read_csv(rd / "reports" / "error_rate.csv")} \
            if (rd / "reports" / "error_rate.csv").exists() else {}
        if not sim and not err:
            raise OSError(f"{rd}: no reports found; run 'analyze' or 'probe' first")
        tags = sorted({r["checkpoint"] for r in sim} | set(err))
        for tag in tags:
            cells = [r for r in sim if r["checkpoint"] == tag and r["reference"] == "word-onehot" and r["score"]]
            best = max(cells, key=lambda r: float(r["score"])) if cells else None
            e = err.get(tag)
            rows.append({"run": rd.name, "strategy": plan.strategy, "checkpoint": tag,
                         "step": int((best or e)["step"]),
                         "token_error_rate": float(e["token_error_rate"]) if e else None,
                         "best_word_layer": int(best["layer"]) if best else None,
                         "best_word_score": float(best["score"]) if best else None})
    header = ["run", "strategy", "checkpoint", "step", "token_error_rate", "best_word_layer", "best_word_score"]
    out.mkdir(parents=True, exist_ok=True)
    path = write_csv(out / "summary.csv", header, rows)
    fmt = lambda v: "" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))
    md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    md += ["| " + " | ".join(fmt(r[h]) for h in header) + " |" for r in rows]
    atomic_write_text(out / "summary.md", "\n".join(md) + "\n")
    print(path)
    return path


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="run (or output) directory")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS threads")
    common.add_argument("--resume", action="store_true", help="skip iterations whose checkpoint exists")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hubertlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("corpus", parents=[common], help="synthesize a corpus and write its manifest")
    for name, helptext in (("plan", "print an iteration plan without running it"),
                           ("train", "run an iteration plan")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--strategy", choices=STRATEGIES)
        p.add_argument("--budget", type=int)
        p.add_argument("--n", type=int)
        p.add_argument("--min-steps", type=int, dest="min_steps")
        p.add_argument("--k", type=int)
        p.add_argument("--k-end", type=int, dest="k_end")
        p.add_argument("--layer-max", type=int, dest="layer_max")
        p.add_argument("--base-layer", type=int, dest="base_layer")
        if name == "train":
            p.add_argument("--manifest", help="ingest this corpus manifest instead of synthesizing")
    for name, helptext in (("analyze", "layerwise PWCCA reports"), ("probe", "linear and CTC probes")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", action="append", help="checkpoint tag (repeatable), e.g. iter02")
        p.add_argument("--manifest")
        if name == "analyze":
            p.add_argument("--kinds", nargs="+", choices=REFERENCE_KINDS)
        else:
            p.add_argument("--no-baseline", action="store_true", help="skip the random-init baseline")
    p = sub.add_parser("compare", parents=[common], help="join reports across runs")
    p.add_argument("runs", nargs="+", help="run directories")
    return parser


COMMANDS = {"corpus": cmd_corpus, "plan": cmd_plan, "train": cmd_train, "analyze": cmd_analyze,
            "probe": cmd_probe, "compare": cmd_compare}


def _limit_threads(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _limit_threads(args.threads):
            COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except DivergenceError as exc:
        return _fail("divergence", exc, EXIT_DIVERGENCE)
    except (OSError, IngestionError) as exc:
        return _fail("io", exc, EXIT_IO)
    except HubertLabError as exc:
        return _fail("error", exc, EXIT_CONFIG)
    return EXIT_OK


def _fail(kind, exc, code):
    msg = " ".join(str(exc).split())
    print(f"hubertlab: {kind} error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
