"""Metrics, model selection, ablation sweeps and the prototype consistency
experiment.

Every driver is a pure function of its config and seeds. Sweeps return a
list of row dicts, one per (setting, algorithm, seed); :func:`aggregate`
adds mean and sample standard deviation rows.
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .adaptive import (
    AdaptiveModel,
    TrainConfig,
    adaptive_train,
    build_augmented,
    predict_logits,
)
from .benchgen import (
    BenchmarkSplit,
    DomainDataset,
    LtConfig,
    MotherSpec,
    draw_points,
    draw_transform,
    generate_lt_benchmark,
)
from .numcore import MlpParams, SgdConfig, ShapeError, mlp_forward
from .protoembed import (
    ConfigError,
    DomainPrototype,
    EmbeddingVariant,
    ProtoConfig,
    VariantContext,
    embed_variant,
    proto_train,
    softmax_head_train,
)

ALGORITHMS = ("ERM", "DA-ERM")


# --- metrics ----------------------------------------------------------------


def topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Per-row hit flags; equal logits rank the lower class index first."""
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (order == np.asarray(labels)[:, None]).any(axis=1)


def accuracy(predictions, labels, k: int = 1) -> float:
    """Top-k accuracy from a logit matrix, or top-1 from class indices."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(predictions) != len(labels):
        raise ShapeError(f"{len(predictions)} predictions for {len(labels)} labels")
    if len(labels) == 0:
        return float("nan")
    if predictions.ndim == 1:
        if k != 1:
            raise ValueError("top-k with k > 1 needs logits")
        return float(np.mean(predictions == labels))
    return float(np.mean(topk_hits(predictions, labels, k)))


@dataclass
class DomainScore:
    domain: str
    split: str
    n: int
    top1: float
    top5: float


@dataclass
class EvalReport:
    rows: list[DomainScore]
    config: dict = field(default_factory=dict)
    seed: int = 0

    def aggregate(self, split: str) -> dict:
        rows = [r for r in self.rows if r.split == split]
        if not rows:
            return {}
        return {
            "top1": float(np.mean([r.top1 for r in rows])),
            "top5": float(np.mean([r.top5 for r in rows])),
            "domains": len(rows),
        }

    def to_dict(self) -> dict:
        splits = sorted({r.split for r in self.rows})
        return {
            "seed": self.seed,
            "config": self.config,
            "per_domain": [asdict(r) for r in self.rows],
            "aggregate": {s: self.aggregate(s) for s in splits},
        }


def evaluate_model(
    model: AdaptiveModel,
    domains: Sequence[DomainDataset],
    prototypes: dict[str, DomainPrototype] | None,
    split: str,
    k: int = 5,
) -> list[DomainScore]:
    rows = []
    for d in domains:
        proto = prototypes.get(d.domain_id) if prototypes else None
        logits = predict_logits(model, proto, d.x_eval)
        rows.append(
            DomainScore(d.domain_id, split, len(d.y_eval), accuracy(logits, d.y_eval, 1), accuracy(logits, d.y_eval, k))
        )
    return rows


# --- experiment pipeline ------------------------------------------------------


def rotation_mother(seed: int = 0, shift_magnitude: float = 2.0, class_scale: float = 1.0) -> MotherSpec:
    """Desk rotation benchmark; the magnitude puts ERM test top-1 near 0.5."""
    return MotherSpec(shift_magnitude=shift_magnitude, class_scale=class_scale, rng_seed=seed)


@dataclass
class ExperimentConfig:
    mother: dict = field(default_factory=lambda: {"shift_kind": "Rotation", "shift_magnitude": 2.0})
    lt: dict = field(default_factory=dict)
    proto: ProtoConfig = field(
        default_factory=lambda: ProtoConfig(T=500, mixup_enabled=True, sgd=SgdConfig(0.05, 1e-5))
    )
    train: TrainConfig = field(default_factory=lambda: TrainConfig(T=3000))
    n_proto_points: int | None = None

    def benchmark(self, seed: int, **lt_overrides) -> BenchmarkSplit:
        spec = MotherSpec(**{**self.mother, "rng_seed": seed})
        return generate_lt_benchmark(spec, LtConfig(**{**self.lt, **lt_overrides, "seed": seed}))

    def seeded(self, seed: int) -> tuple[ProtoConfig, TrainConfig]:
        return (
            replace(self.proto, sgd=replace(self.proto.sgd, rng_seed=seed)),
            replace(self.train, sgd=replace(self.train.sgd, rng_seed=seed)),
        )

    def to_dict(self) -> dict:
        return {
            "mother": self.mother,
            "lt": self.lt,
            "proto": _plain(asdict(self.proto)),
            "train": _plain(asdict(self.train)),
            "n_proto_points": self.n_proto_points,
        }


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if hasattr(obj, "value"):
        return obj.value
    return obj


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:10]


def prototype_points(d: DomainDataset, n: int | None, rng: np.random.Generator | None) -> np.ndarray:
    x = d.x_fit if len(d.x_fit) else d.x_eval
    if n is None or n >= len(x):
        return x
    return x[rng.choice(len(x), size=n, replace=False)]


def build_prototypes(
    variant: EmbeddingVariant,
    ctx: VariantContext,
    domains: Sequence[DomainDataset],
    n_points: int | None = None,
    seed: int = 0,
) -> dict[str, DomainPrototype]:
    rng = np.random.default_rng([seed, 0x9E37])
    return {
        d.domain_id: embed_variant(variant, ctx, prototype_points(d, n_points, rng), d.domain_id) for d in domains
    }


@dataclass
class TrainedRun:
    """A model plus everything needed to build prototypes for new domains."""

    model: AdaptiveModel
    variant: EmbeddingVariant
    ctx: VariantContext
    train_prototypes: dict[str, DomainPrototype] | None


def train_erm(split: BenchmarkSplit, train_cfg: TrainConfig) -> AdaptiveModel:
    return adaptive_train(build_augmented(split.train, None), train_cfg, split.classes)


def train_variant(
    split: BenchmarkSplit,
    cfg: ExperimentConfig,
    seed: int,
    variant: EmbeddingVariant = EmbeddingVariant.PROTOTYPE,
    erm_model: AdaptiveModel | None = None,
    proto_net: MlpParams | None = None,
) -> TrainedRun:
    variant = EmbeddingVariant(variant)
    proto_cfg, train_cfg = cfg.seeded(seed)
    if variant is EmbeddingVariant.NONE:
        model = erm_model or train_erm(split, train_cfg)
        return TrainedRun(model, variant, VariantContext(proto_cfg.d_D), None)
    ctx = VariantContext(proto_cfg.d_D)
    build = variant
    if variant in (EmbeddingVariant.PROTOTYPE, EmbeddingVariant.RANDOM_AT_INFERENCE):
        ctx.proto_net = proto_net or proto_train(split.train, proto_cfg)
        build = EmbeddingVariant.PROTOTYPE
    elif variant is EmbeddingVariant.MEAN_FEATURE:
        ctx.erm_features = (erm_model or train_erm(split, train_cfg)).f_ft
        ctx.d_D = ctx.erm_features.out_dim
    elif variant is EmbeddingVariant.SOFTMAX_HEAD:
        ctx.softmax_trunk = softmax_head_train(split.train, proto_cfg)
    protos = build_prototypes(build, ctx, split.train, cfg.n_proto_points, seed)
    model = adaptive_train(build_augmented(split.train, list(protos.values())), train_cfg, split.classes)
    return TrainedRun(model, variant, ctx, protos)


def test_prototypes(
    run: TrainedRun,
    domains: Sequence[DomainDataset],
    n_points: int | None = None,
    seed: int = 0,
    source: str = "pool",
) -> dict[str, DomainPrototype] | None:
    """Prototypes for unseen domains: from the unlabeled ``fit`` pool, or
    from the evaluation inputs themselves with ``source='eval'``."""
    if run.variant is EmbeddingVariant.NONE:
        return None
    if source == "eval":
        domains = [DomainDataset(d.domain_id, d.x_eval, d.y_eval, d.x_eval, d.y_eval) for d in domains]
    if run.variant is EmbeddingVariant.RANDOM_AT_INFERENCE:
        own = build_prototypes(EmbeddingVariant.PROTOTYPE, run.ctx, domains, n_points, seed)
        ids = [d.domain_id for d in domains]
        # Every domain gets the next domain's prototype (a derangement).
        return {ids[i]: own[ids[(i + 1) % len(ids)]] for i in range(len(ids))}
    return build_prototypes(run.variant, run.ctx, domains, n_points, seed)


def test_accuracy(run: TrainedRun, domains: Sequence[DomainDataset], **kw) -> float:
    rows = evaluate_model(run.model, domains, test_prototypes(run, domains, **kw), "test")
    return float(np.mean([r.top1 for r in rows]))


def full_report(run: TrainedRun, split: BenchmarkSplit, seed: int, config: dict, source: str = "pool") -> EvalReport:
    rows = evaluate_model(run.model, split.train, run.train_prototypes, "train")
    for name, domains in (("val", split.val), ("test", split.test)):
        if domains:
            rows += evaluate_model(run.model, domains, test_prototypes(run, domains, seed=seed, source=source), name)
    return EvalReport(rows, config, seed)


def compare_erm_da(split: BenchmarkSplit, cfg: ExperimentConfig, seed: int) -> dict[str, float]:
    _, train_cfg = cfg.seeded(seed)
    erm = TrainedRun(train_erm(split, train_cfg), EmbeddingVariant.NONE, VariantContext(0), None)
    da = train_variant(split, cfg, seed)
    return {"ERM": test_accuracy(erm, split.test), "DA-ERM": test_accuracy(da, split.test)}


# --- model selection ------------------------------------------------------------


@dataclass
class HyperGrid:
    params: dict[str, list]

    def __post_init__(self):
        if not self.params or any(len(v) == 0 for v in self.params.values()):
            raise ConfigError("hyperparameter grid is empty")

    def points(self) -> list[dict]:
        keys = list(self.params)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.params[k] for k in keys))]


Trainer = Callable[[list, object, dict], float]


def lodo_scores(domains: Sequence, grid: HyperGrid, trainer: Trainer) -> np.ndarray:
    """Score matrix (grid point x held-out domain)."""
    if len(domains) < 2:
        raise ConfigError("leave-one-domain-out needs at least two domains")
    pts = grid.points()
    scores = np.zeros((len(pts), len(domains)))
    for i, p in enumerate(pts):
        for j, held in enumerate(domains):
            rest = [d for k, d in enumerate(domains) if k != j]
            scores[i, j] = trainer(rest, held, p)
    return scores


def leave_one_domain_out(domains: Sequence, grid: HyperGrid, trainer: Trainer) -> dict:
    """Grid point with the best validation score averaged over all held-out
    trials; ties go to the earliest point in grid order.

    ``trainer(train_domains, held_out_domain, point)`` returns the validation
    accuracy over the training domains.
    """
    means = lodo_scores(domains, grid, trainer).mean(axis=1)
    return grid.points()[int(np.argmax(means))]


def lodo_trainer(cfg: ExperimentConfig, n_classes: int, seed: int = 0) -> Trainer:
    """DA-ERM trainer for :func:`leave_one_domain_out`. Grid keys may be
    ``learning_rate``, ``d_D``, ``gamma``, ``T``, ``proto_T``."""

    def run(train_domains, held_out, point) -> float:
        proto = replace(cfg.proto, d_D=point.get("d_D", cfg.proto.d_D), T=point.get("proto_T", cfg.proto.T))
        train = replace(
            cfg.train,
            T=point.get("T", cfg.train.T),
            gamma=point.get("gamma", cfg.train.gamma),
            sgd=replace(cfg.train.sgd, learning_rate=point.get("learning_rate", cfg.train.sgd.learning_rate)),
        )
        sub = replace(cfg, proto=proto, train=train)
        split = BenchmarkSplit(train_domains[0].x_fit.shape[1], n_classes, list(train_domains))
        trained = train_variant(split, sub, seed)
        rows = evaluate_model(trained.model, train_domains, trained.train_prototypes, "train")
        return float(np.mean([r.top1 for r in rows]))

    return run


# --- consistency -------------------------------------------------------------------


@dataclass
class ConsistencyCurve:
    n: list[int]
    error: list[float]
    slope: float | None
    intercept: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def _mean_embedding(net: MlpParams, x: np.ndarray, chunk: int = 32768) -> np.ndarray:
    total = np.zeros(net.out_dim)
    for i in range(0, len(x), chunk):
        emb, _ = mlp_forward(net, x[i : i + chunk])
        total += emb.sum(axis=0)
    return total / len(x)


def fit_loglog(n: Sequence[int], err: Sequence[float]) -> tuple[float | None, float | None]:
    pts = [(math.log(a), math.log(b)) for a, b in zip(n, err) if b >= 1e-12]
    if len(pts) < 2:
        return None, None
    slope, intercept = np.polyfit(*zip(*pts), 1)
    return float(slope), float(intercept)


def consistency_experiment(
    net: MlpParams,
    spec: MotherSpec,
    n_grid: Sequence[int],
    trials: int,
    seed: int = 0,
    class_probs: np.ndarray | None = None,
) -> ConsistencyCurve:
    """Sup-norm error of n-point prototypes against a 64*max(n)-point
    reference, averaged over trials, with a least-squares log-log slope."""
    n_grid = list(n_grid)
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])) or trials < 1:
        raise ConfigError("n_grid must be increasing and trials >= 1")
    rng = np.random.default_rng([seed, 0xC0515])
    transform = draw_transform(spec, rng)
    probs = np.full(spec.base_classes, 1 / spec.base_classes) if class_probs is None else class_probs

    def sample(n):
        return draw_points(spec, transform, rng.choice(spec.base_classes, size=n, p=probs), rng)

    mu_ref = _mean_embedding(net, sample(64 * max(n_grid)))
    errs = []
    for n in n_grid:
        errs.append(float(np.mean([np.max(np.abs(_mean_embedding(net, sample(n)) - mu_ref)) for _ in range(trials)])))
    slope, intercept = fit_loglog(n_grid, errs)
    return ConsistencyCurve(n_grid, errs, slope, intercept)


# --- sweeps --------------------------------------------------------------------------


def _run_cells(fn, cells: list, jobs: int = 1) -> list:
    if jobs <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, cells))


def _domain_count_cell(args):
    cfg, n, mode, total, seed = args
    over = {"N": n}
    if mode == "FixedTotal":
        over["fit_size"] = total // n
    split = cfg.benchmark(seed, **over)
    accs = compare_erm_da(split, cfg, seed)
    return [{"N": n, "algorithm": a, "seed": seed, "accuracy": accs[a]} for a in ALGORITHMS]


def ablation_domain_count(
    cfg: ExperimentConfig,
    n_values: Sequence[int],
    mode: str = "FixedPerDomain",
    seeds: Iterable[int] = (0,),
    total: int | None = None,
    jobs: int = 1,
) -> list[dict]:
    """ERM vs DA-ERM test accuracy as the number of training domains grows.
    Benchmarks (including val/test domains) are regenerated for every N."""
    if len(n_values) < 2:
        raise ConfigError("need at least two domain counts")
    if mode not in ("FixedPerDomain", "FixedTotal"):
        raise ConfigError(f"unknown mode {mode!r}")
    if mode == "FixedTotal" and total is None:
        raise ConfigError("FixedTotal needs a total sample count")
    cells = [(cfg, n, mode, total, s) for n in n_values for s in seeds]
    return [row for rows in _run_cells(_domain_count_cell, cells, jobs) for row in rows]


def _tail_cell(args):
    cfg, f, seed = args
    split = cfg.benchmark(seed, f=f)
    accs = compare_erm_da(split, cfg, seed)
    return [{"f": f, "algorithm": a, "seed": seed, "accuracy": accs[a]} for a in ALGORITHMS]


def ablation_tail_index(
    cfg: ExperimentConfig, f_values: Sequence[float], seeds: Iterable[int] = (0,), jobs: int = 1
) -> list[dict]:
    cells = [(cfg, f, s) for f in f_values for s in seeds]
    return [row for rows in _run_cells(_tail_cell, cells, jobs) for row in rows]


def _variant_cell(args):
    cfg, variants, seed = args
    split = cfg.benchmark(seed)
    _, train_cfg = cfg.seeded(seed)
    erm = train_erm(split, train_cfg)
    shared: dict[str, TrainedRun] = {}
    rows = []
    for v in variants:
        v = EmbeddingVariant(v)
        if v in (EmbeddingVariant.PROTOTYPE, EmbeddingVariant.RANDOM_AT_INFERENCE):
            base = shared.get("proto") or train_variant(split, cfg, seed, EmbeddingVariant.PROTOTYPE)
            shared["proto"] = base
            run = replace(base, variant=v)
        else:
            run = train_variant(split, cfg, seed, v, erm_model=erm)
        rows.append({"variant": v.value, "seed": seed, "accuracy": test_accuracy(run, split.test, seed=seed)})
    return rows


def ablation_embedding_variant(
    cfg: ExperimentConfig, variants: Sequence = tuple(EmbeddingVariant), seeds: Iterable[int] = (0,), jobs: int = 1
) -> list[dict]:
    """One row per (variant, seed). RandomAtInference reuses the Prototype
    model and hands each test domain another test domain's prototype."""
    if not variants:
        raise ConfigError("no variants requested")
    cells = [(cfg, list(variants), s) for s in seeds]
    return [row for rows in _run_cells(_variant_cell, cells, jobs) for row in rows]


def ablation_prototype_count(
    cfg: ExperimentConfig,
    n_values: Sequence[int],
    seed: int = 0,
    run: TrainedRun | None = None,
    split: BenchmarkSplit | None = None,
) -> list[dict]:
    """One trained DA-ERM model, test prototypes rebuilt from n_p pool points."""
    if any(n < 1 for n in n_values):
        raise ConfigError("prototype point counts must be positive")
    split = split or cfg.benchmark(seed)
    run = run or train_variant(split, cfg, seed)
    return [
        {"n_p": n, "seed": seed, "accuracy": test_accuracy(run, split.test, n_points=n, seed=seed)} for n in n_values
    ]


def _train_single_domain(d: DomainDataset, n_classes: int, train_cfg: TrainConfig) -> AdaptiveModel:
    return adaptive_train(build_augmented([d], None), train_cfg, n_classes)


def adaptivity_gap(split: BenchmarkSplit, cfg: ExperimentConfig, seed: int = 0) -> dict[str, float]:
    """Per-test-domain oracle models vs the universal (ERM) and adaptive
    (DA-ERM) classifiers, all scored on the test domains' eval splits."""
    if not split.test:
        raise ConfigError("adaptivity gap needs labeled test domains")
    _, train_cfg = cfg.seeded(seed)
    oracle = []
    for d in split.test:
        m = _train_single_domain(d, split.classes, train_cfg)
        oracle.append(accuracy(predict_logits(m, None, d.x_eval), d.y_eval))
    accs = compare_erm_da(split, cfg, seed)
    return {"oracle": float(np.mean(oracle)), "universal": accs["ERM"], "adaptive": accs["DA-ERM"]}


# --- reporting -----------------------------------------------------------------------


def aggregate(rows: list[dict], keys: Sequence[str], value: str = "accuracy") -> list[dict]:
    """Append mean and sample-std rows per group (seed column set to 'agg')."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r[value])
    out = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        vals = groups[key]
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out.append({**dict(zip(keys, key)), "seed": "agg", value: float(np.mean(vals)), "std": std})
    return out


def write_csv(rows: list[dict], path) -> None:
    if not rows:
        raise ValueError("nothing to write")
    fields = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
