"""Command-line driver.

    domgen gen          --config C --out DIR
    domgen train-proto  --config C --data D --out DIR
    domgen train        --config C --data D [--proto DIR] --out DIR
    domgen eval         --model M --data D --out DIR [--proto-source pool|eval]
    domgen ablate KIND  --config C --out DIR [--jobs k]
    domgen consistency  --config C --out DIR

Exit codes: 0 ok, 2 config/validation error, 3 IO error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import typing
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import evalharness as eh
from .adaptive import (
    TrainConfig,
    adaptive_train,
    build_augmented,
    model_from_dict,
    model_to_dict,
)
from .benchgen import (
    BenchmarkSplit,
    LtConfig,
    MotherSpec,
    generate_lt_benchmark,
    load_external_dataset,
    write_dataset,
)
from .numcore import NumericError, params_from_dict, params_to_dict
from .protoembed import (
    EmbeddingVariant,
    ProtoConfig,
    VariantContext,
    compute_prototype,
    load_prototypes,
    proto_train,
    prototypes_to_dict,
    softmax_head_train,
)

CONFIG_FORMAT = "domgen-config-v1"
ABLATIONS = ("domain-count", "tail-index", "embedding-variant", "prototype-count", "adaptivity-gap")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# --- config parsing ------------------------------------------------------------


def _check_keys(doc, allowed, where: str) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}: unknown key (allowed: {', '.join(sorted(allowed))})")


def build(cls, doc, where: str, skip: tuple[str, ...] = ()):
    """Instantiate a dataclass from a JSON object, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.name not in skip]
    _check_keys(doc, names, where)
    kwargs = {}
    for name, value in doc.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            value = build(hint, value, f"{where}.{name}")
        elif typing.get_origin(hint) is tuple and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def load_config(path, allowed: tuple[str, ...]) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise IOError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}") from None
    _check_keys(doc, allowed + ("format",), "config")
    if doc.get("format", CONFIG_FORMAT) != CONFIG_FORMAT:
        raise ConfigError(f"config.format: expected {CONFIG_FORMAT!r}")
    return doc


def mother_from(doc: dict, seed: int) -> MotherSpec:
    return build(MotherSpec, {**doc, "rng_seed": seed}, "config.mother", skip=("class_means",))


def lt_from(doc: dict, seed: int) -> LtConfig:
    return build(LtConfig, {**doc, "seed": seed}, "config.lt")


def _merge(default, override: dict) -> dict:
    """Overlay a partial JSON object on a dataclass default, one level deep."""
    if not isinstance(override, dict):
        raise ConfigError("expected an object")
    merged = eh._plain(dataclasses.asdict(default))
    for k, v in override.items():
        merged[k] = {**merged[k], **v} if isinstance(merged.get(k), dict) and isinstance(v, dict) else v
    return merged


def experiment_from(doc: dict) -> eh.ExperimentConfig:
    _check_keys(doc, ("mother", "lt", "proto", "train", "n_proto_points"), "config.experiment")
    base = eh.ExperimentConfig()
    mother = {**base.mother, **doc.get("mother", {})}
    lt = doc.get("lt", {})
    mother_from(mother, 0)
    lt_from(lt, 0)
    proto = build(ProtoConfig, _merge(base.proto, doc.get("proto", {})), "config.experiment.proto")
    train = build(TrainConfig, _merge(base.train, doc.get("train", {})), "config.experiment.train")
    return eh.ExperimentConfig(mother, lt, proto, train, doc.get("n_proto_points"))


# --- helpers ---------------------------------------------------------------------


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IOError(f"cannot create output directory {out}: {e}") from None
    return out


def _write_json(doc, path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest(args, command: str, resolved: dict, out: Path, extra: dict | None = None) -> None:
    doc = {
        "command": command,
        "config": resolved,
        "seed": args.seed,
        "paths": {k: str(v) for k, v in sorted(vars(args).items()) if k in ("config", "data", "proto", "model", "out") and v},
    }
    if extra:
        doc.update(extra)
    if not args.no_timestamp:
        doc["created"] = datetime.now(timezone.utc).isoformat()
    _write_json(doc, out / "manifest.json")


def _log_csv(losses: list[float], path) -> None:
    with open(path, "w") as fh:
        fh.write("round,loss\n")
        for t, loss in enumerate(losses):
            fh.write(f"{t},{loss!r}\n")


def _seed(args, doc: dict) -> int:
    if args.seed is None:
        args.seed = int(doc.get("seed", 0))
    return args.seed


def _load_data(path) -> BenchmarkSplit:
    try:
        return load_external_dataset(path)
    except OSError as e:
        raise IOError(f"cannot read dataset {path}: {e}") from None


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:10]


# --- commands --------------------------------------------------------------------------


def cmd_gen(args) -> int:
    doc = load_config(args.config, ("mother", "lt", "seed"))
    seed = _seed(args, doc)
    spec = mother_from(doc.get("mother", {}), seed)
    lt = lt_from(doc.get("lt", {}), seed)
    try:
        split = generate_lt_benchmark(spec, lt)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    out = _out_dir(args.out)
    write_dataset(split, out / "dataset.jsonl")
    resolved = {
        "mother": eh._plain({k: v for k, v in dataclasses.asdict(spec).items() if k != "class_means"}),
        "lt": dataclasses.asdict(lt),
    }
    _manifest(args, "gen", resolved, out)
    return EXIT_OK


def cmd_train_proto(args) -> int:
    doc = load_config(args.config, ("proto", "seed"))
    seed = _seed(args, doc)
    cfg = build(ProtoConfig, doc.get("proto", {}), "config.proto")
    cfg = dataclasses.replace(cfg, sgd=dataclasses.replace(cfg.sgd, rng_seed=seed))
    split = _load_data(args.data)
    losses: list[float] = []
    try:
        net = proto_train(split.train, cfg, on_round=lambda t, loss: losses.append(loss))
    except ValueError as e:
        raise ConfigError(str(e)) from None
    protos = [compute_prototype(net, d.x_fit, d.domain_id) for d in split.train]
    out = _out_dir(args.out)
    _write_json(params_to_dict(net), out / "embedding.json")
    _write_json(prototypes_to_dict(protos), out / "prototypes.json")
    _log_csv(losses, out / "proto_log.csv")
    _manifest(args, "train-proto", eh._plain(dataclasses.asdict(cfg)), out)
    return EXIT_OK


def _load_proto_dir(path):
    path = Path(path)
    if path.is_file():
        path = path.parent
    try:
        with open(path / "embedding.json") as fh:
            net = params_from_dict(json.load(fh))
        protos = load_prototypes(path / "prototypes.json")
    except OSError as e:
        raise IOError(f"cannot read prototype artifacts in {path}: {e}") from None
    return net, protos


def cmd_train(args) -> int:
    doc = load_config(args.config, ("train", "proto", "variant", "seed"))
    seed = _seed(args, doc)
    cfg = build(TrainConfig, doc.get("train", {}), "config.train")
    cfg = dataclasses.replace(cfg, sgd=dataclasses.replace(cfg.sgd, rng_seed=seed))
    try:
        variant = EmbeddingVariant(doc.get("variant", "Prototype"))
    except ValueError:
        raise ConfigError(f"config.variant: must be one of {[v.value for v in EmbeddingVariant]}") from None
    split = _load_data(args.data)
    embedder, protos = None, None
    if variant in (EmbeddingVariant.PROTOTYPE, EmbeddingVariant.RANDOM_AT_INFERENCE):
        if not args.proto:
            raise ConfigError(f"variant {variant.value} needs --proto")
        embedder, protos = _load_proto_dir(args.proto)
        if embedder.in_dim != split.dim:
            raise ConfigError(f"embedding input dim {embedder.in_dim} != dataset dim {split.dim}")
        if protos and len(protos[0].mu) != embedder.out_dim:
            raise ConfigError("prototype archive d_D does not match embedding network")
    elif variant is EmbeddingVariant.MEAN_FEATURE:
        embedder = eh.train_erm(split, cfg).f_ft
    elif variant is EmbeddingVariant.SOFTMAX_HEAD:
        pcfg = build(ProtoConfig, doc.get("proto", {}), "config.proto")
        embedder = softmax_head_train(split.train, dataclasses.replace(pcfg, sgd=dataclasses.replace(pcfg.sgd, rng_seed=seed)))
    if embedder is not None and protos is None:
        protos = [compute_prototype(embedder, d.x_fit, d.domain_id) for d in split.train]
    losses: list[float] = []
    model = adaptive_train(
        build_augmented(split.train, protos), cfg, split.classes, on_round=lambda t, loss: losses.append(loss)
    )
    out = _out_dir(args.out)
    ckpt = model_to_dict(model)
    ckpt["variant"] = variant.value
    ckpt["embedder"] = params_to_dict(embedder) if embedder is not None else None
    _write_json(ckpt, out / "model.json")
    _log_csv(losses, out / "train_log.csv")
    _manifest(args, "train", {"train": eh._plain(dataclasses.asdict(cfg)), "variant": variant.value}, out)
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        with open(args.model) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise IOError(f"cannot read model {args.model}: {e}") from None
    try:
        model = model_from_dict(doc)
    except (KeyError, ValueError) as e:
        raise ConfigError(f"model checkpoint: {e}") from None
    variant = EmbeddingVariant(doc.get("variant", "Prototype" if model.uses_prototype else "None"))
    split = _load_data(args.data)
    if not split.test:
        raise ConfigError("dataset has no test split")
    if split.dim != model.f_ft.in_dim:
        raise ConfigError(f"model input dim {model.f_ft.in_dim} != dataset dim {split.dim}")
    ctx = VariantContext(model.d_D)
    if doc.get("embedder") is not None:
        net = params_from_dict(doc["embedder"])
        ctx.proto_net = ctx.erm_features = ctx.softmax_trunk = net
    build_variant = EmbeddingVariant.PROTOTYPE if variant is EmbeddingVariant.RANDOM_AT_INFERENCE else variant
    train_protos = eh.build_prototypes(build_variant, ctx, split.train) if model.uses_prototype else None
    run = eh.TrainedRun(model, variant, ctx, train_protos)
    report = eh.full_report(run, split, args.seed or 0, {"variant": variant.value, "proto_source": args.proto_source}, args.proto_source)
    out = _out_dir(args.out)
    stem = f"report_{_file_hash(args.model)}_s{args.seed or 0}"
    rows = [dataclasses.asdict(r) for r in report.rows]
    agg = [{"domain": "all", "split": s, "n": v["domains"], "top1": v["top1"], "top5": v["top5"]}
           for s, v in report.to_dict()["aggregate"].items()]
    eh.write_csv(rows + agg, out / f"{stem}.csv")
    _write_json(report.to_dict(), out / f"{stem}.json")
    _manifest(args, "eval", {"proto_source": args.proto_source}, out)
    return EXIT_OK


def _ablate_rows(kind: str, doc: dict, cfg: eh.ExperimentConfig, seeds: list[int], jobs: int):
    if kind == "domain-count":
        rows = eh.ablation_domain_count(
            cfg, doc.get("n_values", [4, 8, 12]), doc.get("mode", "FixedPerDomain"), seeds, doc.get("total"), jobs
        )
        return rows, ["N", "algorithm"]
    if kind == "tail-index":
        return eh.ablation_tail_index(cfg, doc.get("f_values", [0.02, 0.2, 1.0]), seeds, jobs), ["f", "algorithm"]
    if kind == "embedding-variant":
        variants = [EmbeddingVariant(v) for v in doc.get("variants", [v.value for v in EmbeddingVariant])]
        return eh.ablation_embedding_variant(cfg, variants, seeds, jobs), ["variant"]
    if kind == "prototype-count":
        rows = [r for s in seeds for r in eh.ablation_prototype_count(cfg, doc.get("n_p_values", [25, 50, 100, 200, 400]), s)]
        return rows, ["n_p"]
    rows = []
    for s in seeds:
        res = eh.adaptivity_gap(cfg.benchmark(s), cfg, s)
        rows += [{"model": k, "seed": s, "accuracy": v} for k, v in res.items()]
    return rows, ["model"]


def cmd_ablate(args) -> int:
    if args.kind not in ABLATIONS:
        raise ConfigError(f"unknown ablation kind {args.kind!r}; valid kinds: {', '.join(ABLATIONS)}")
    doc = load_config(
        args.config,
        ("experiment", "seeds", "seed", "n_values", "mode", "total", "f_values", "variants", "n_p_values"),
    )
    _seed(args, doc)
    cfg = experiment_from(doc.get("experiment", {}))
    seeds = doc.get("seeds", [args.seed])
    try:
        rows, keys = _ablate_rows(args.kind, doc, cfg, seeds, args.jobs)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    out = _out_dir(args.out)
    stem = f"{args.kind}_{eh.config_hash(cfg.to_dict())}_s{args.seed}"
    eh.write_csv(rows + eh.aggregate(rows, keys), out / f"{stem}.csv")
    _write_json({"kind": args.kind, "rows": rows, "aggregate": eh.aggregate(rows, keys)}, out / f"{stem}.json")
    _manifest(args, f"ablate {args.kind}", {"experiment": cfg.to_dict(), "seeds": seeds}, out)
    return EXIT_OK


def cmd_consistency(args) -> int:
    doc = load_config(args.config, ("experiment", "seed", "n_grid", "trials", "train_net"))
    seed = _seed(args, doc)
    cfg = experiment_from(doc.get("experiment", {}))
    n_grid = doc.get("n_grid", [16, 64, 256, 1024, 4096])
    proto_cfg, _ = cfg.seeded(seed)
    if doc.get("train_net", True):
        net = proto_train(cfg.benchmark(seed).train, proto_cfg)
    else:
        from .protoembed import init_embedding_net

        net = init_embedding_net(MotherSpec(**cfg.mother).input_dim, proto_cfg, np.random.default_rng(seed))
    curve = eh.consistency_experiment(net, MotherSpec(**{**cfg.mother, "rng_seed": seed}), n_grid, doc.get("trials", 20), seed)
    out = _out_dir(args.out)
    stem = f"consistency_{eh.config_hash(cfg.to_dict())}_s{seed}"
    eh.write_csv([{"n": n, "error": e} for n, e in zip(curve.n, curve.error)], out / f"{stem}.csv")
    _write_json(curve.to_dict(), out / f"{stem}.json")
    _manifest(args, "consistency", {"experiment": cfg.to_dict(), "n_grid": n_grid}, out)
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train-proto": cmd_train_proto,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "consistency": cmd_consistency,
}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="domgen", description="Adaptive domain generalization with prototypes.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--no-timestamp", action="store_true", help="omit the manifest timestamp")

    common(sub.add_parser("gen", help="generate a synthetic benchmark"))
    sp = sub.add_parser("train-proto", help="train the domain embedding network")
    common(sp)
    sp.add_argument("--data", required=True)
    sp = sub.add_parser("train", help="train a (domain-adaptive) classifier")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--proto", default=None)
    sp = sub.add_parser("eval", help="evaluate a trained model")
    common(sp, config=False)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--proto-source", choices=("pool", "eval"), default="pool")
    sp = sub.add_parser("ablate", help="run an ablation sweep")
    sp.add_argument("kind")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1)
    common(sub.add_parser("consistency", help="prototype sample-size scaling"))
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    for attr in ("jobs",):
        if not hasattr(args, attr):
            setattr(args, attr, 1)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, KeyError) as e:
        # Covers config, dataset parse/validation and shape errors from every module.
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
