"""Synthetic multi-domain benchmarks with long tails, label shift and
covariate shift.

Classes are isotropic Gaussians around fixed means. Each domain draws its
own head-class subset (label shift) and its own input transform (covariate
shift): a random rotation, a random offset, or both.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DATA_FORMAT = "domgen-data-v1"
SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    pass


class DatasetParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class DatasetValidationError(ValueError):
    pass


class ShiftKind(str, enum.Enum):
    ROTATION = "Rotation"
    AFFINE_SHIFT = "AffineShift"
    BOTH = "Both"


def _draw_class_means(n_classes: int, dim: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    means = []
    while len(means) < n_classes:
        for _ in range(10_000):
            m = rng.standard_normal(dim) * 1.5
            if all(np.linalg.norm(m - o) >= 4 * scale for o in means):
                means.append(m)
                break
        else:
            raise ConfigError("could not place separable class means; lower class_scale")
    return np.array(means)


@dataclass
class MotherSpec:
    base_classes: int = 20
    input_dim: int = 16
    class_scale: float = 1.0
    shift_kind: ShiftKind = ShiftKind.ROTATION
    shift_magnitude: float = 1.0
    rng_seed: int = 0
    class_means: np.ndarray | None = None

    def __post_init__(self):
        self.shift_kind = ShiftKind(self.shift_kind)
        if self.base_classes < 1 or self.input_dim < 1:
            raise ConfigError("base_classes and input_dim must be positive")
        if not self.class_scale > 0:
            raise ConfigError("class_scale must be positive")
        if not self.shift_magnitude > 0:
            raise ConfigError("shift_magnitude must be positive")
        if self.shift_kind is not ShiftKind.AFFINE_SHIFT and self.shift_magnitude >= np.pi:
            raise ConfigError("rotation angle must be below pi")
        if self.class_means is None:
            rng = np.random.default_rng([self.rng_seed, 0xC1A55])
            self.class_means = _draw_class_means(self.base_classes, self.input_dim, self.class_scale, rng)
        else:
            self.class_means = np.asarray(self.class_means, dtype=np.float64)
            if self.class_means.shape != (self.base_classes, self.input_dim):
                raise ConfigError("class_means must be base_classes x input_dim")
            if len(np.unique(self.class_means, axis=0)) != self.base_classes:
                raise ConfigError("class means must be pairwise distinct")


@dataclass
class DomainTransform:
    rotation: np.ndarray
    offset: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.rotation.T + self.offset


def cayley_rotation(dim: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Random orthogonal matrix whose largest principal rotation angle is
    ``angle`` (Cayley transform of a rescaled random skew-symmetric matrix)."""
    if dim < 2 or angle == 0:
        return np.eye(dim)
    g = rng.standard_normal((dim, dim))
    skew = g - g.T
    skew *= np.tan(angle / 2) / np.linalg.norm(skew, 2)
    eye = np.eye(dim)
    return np.linalg.solve(eye - skew, eye + skew)


def draw_transform(spec: MotherSpec, rng: np.random.Generator) -> DomainTransform:
    d, m = spec.input_dim, spec.shift_magnitude
    rotation, offset = np.eye(d), np.zeros(d)
    if spec.shift_kind in (ShiftKind.ROTATION, ShiftKind.BOTH):
        rotation = cayley_rotation(d, m * rng.uniform(0.5, 1.0), rng)
    if spec.shift_kind in (ShiftKind.AFFINE_SHIFT, ShiftKind.BOTH):
        v = rng.standard_normal(d)
        offset = m * v / np.linalg.norm(v)
    return DomainTransform(rotation, offset)


def draw_points(spec: MotherSpec, transform: DomainTransform, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= spec.base_classes):
        raise IndexError("unknown class")
    z = rng.standard_normal((len(labels), spec.input_dim))
    return transform.apply(spec.class_means[labels] + spec.class_scale * z)


def _labels_from_counts(counts: dict[int, int]) -> np.ndarray:
    return np.concatenate(
        [np.full(n, c, dtype=np.int64) for c, n in sorted(counts.items()) if n > 0] or [np.zeros(0, np.int64)]
    )


@dataclass
class DomainDataset:
    """One domain: a ``fit`` sub-split for training or prototype pools and an
    ``eval`` sub-split for measuring accuracy. ``transform`` is kept only for
    diagnostics and is never written to disk."""

    domain_id: str
    x_fit: np.ndarray
    y_fit: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    transform: DomainTransform | None = None

    @property
    def n_fit(self) -> int:
        return len(self.y_fit)

    def class_histogram(self, n_classes: int) -> np.ndarray:
        return np.bincount(self.y_fit, minlength=n_classes)

    def content_equal(self, other: "DomainDataset") -> bool:
        return self.domain_id == other.domain_id and all(
            np.array_equal(a, b)
            for a, b in [
                (self.x_fit, other.x_fit),
                (self.y_fit, other.y_fit),
                (self.x_eval, other.x_eval),
                (self.y_eval, other.y_eval),
            ]
        )


def sample_domain(
    spec: MotherSpec,
    counts: dict[int, int],
    domain_seed,
    eval_counts: dict[int, int] | None = None,
    domain_id: str = "d0",
) -> DomainDataset:
    for c, n in counts.items():
        if not 0 <= c < spec.base_classes:
            raise IndexError(f"unknown class {c}")
        if n < 0:
            raise ConfigError(f"negative count for class {c}")
    rng = np.random.default_rng(domain_seed)
    transform = draw_transform(spec, rng)
    y_fit = _labels_from_counts(counts)
    x_fit = draw_points(spec, transform, y_fit, rng)
    y_eval = _labels_from_counts(eval_counts or {})
    x_eval = draw_points(spec, transform, y_eval, rng)
    return DomainDataset(domain_id, x_fit, y_fit, x_eval, y_eval, transform)


@dataclass
class LtConfig:
    N: int = 12
    K: int = 6
    A: int = 60
    f: float = 0.1
    n_val_domains: int = 3
    n_test_domains: int = 4
    train_eval_per_class: int = 20
    val_per_class: int = 20
    test_per_class: int = 40
    fit_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.N < 1 or self.K < 1 or self.A < 1:
            raise ConfigError("N, K and A must be >= 1")
        if not 0 <= self.f <= 1:
            raise ConfigError("f must lie in [0, 1]")
        if self.n_val_domains < 0 or self.n_test_domains < 0:
            raise ConfigError("domain counts must be non-negative")
        if self.fit_size is not None and self.fit_size < 1:
            raise ConfigError("fit_size must be positive")


def lt_counts(classes: Sequence[int], head: set[int], per_head: int, f: float) -> dict[int, int]:
    """Head classes get ``per_head`` points, the rest round(per_head*f)
    (round-half-even); zero-count classes are dropped."""
    tail = round(per_head * f)
    out = {c: (per_head if c in head else tail) for c in classes}
    return {c: n for c, n in out.items() if n > 0}


def rescale_counts(counts: dict[int, int], total: int) -> dict[int, int]:
    """Largest-remainder allocation of ``total`` points in the given proportions."""
    keys = sorted(counts)
    w = np.array([counts[k] for k in keys], dtype=np.float64)
    raw = total * w / w.sum()
    base = np.floor(raw).astype(int)
    rem = total - base.sum()
    order = sorted(range(len(keys)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:rem]:
        base[i] += 1
    return {k: int(n) for k, n in zip(keys, base) if n > 0}


@dataclass
class BenchmarkSplit:
    dim: int
    classes: int
    train: list[DomainDataset] = field(default_factory=list)
    val: list[DomainDataset] = field(default_factory=list)
    test: list[DomainDataset] = field(default_factory=list)

    def splits(self) -> dict[str, list[DomainDataset]]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def all_domains(self) -> list[DomainDataset]:
        return self.train + self.val + self.test

    def validate(self) -> None:
        if not self.train:
            raise DatasetValidationError("no training domains")
        ids = [d.domain_id for d in self.all_domains()]
        if len(set(ids)) != len(ids):
            raise DatasetValidationError("domain ids must be unique across splits")
        seen = set()
        for d in self.train:
            seen.update(np.unique(d.y_fit).tolist())
        for name, domains in self.splits().items():
            for d in domains:
                for x, y, sub in ((d.x_fit, d.y_fit, "fit"), (d.x_eval, d.y_eval, "eval")):
                    if len(x) != len(y) or (len(x) and x.shape[1] != self.dim):
                        raise DatasetValidationError(f"domain {d.domain_id}/{sub}: bad shape")
                    if len(y) and (y.min() < 0 or y.max() >= self.classes):
                        raise DatasetValidationError(f"domain {d.domain_id}: label out of range")
                    if name != "train":
                        unseen = sorted(set(np.unique(y).tolist()) - seen)
                        if unseen:
                            raise DatasetValidationError(
                                f"domain {d.domain_id}: class {unseen[0]} never appears in training"
                            )

    def content_equal(self, other: "BenchmarkSplit") -> bool:
        if (self.dim, self.classes) != (other.dim, other.classes):
            return False
        for a, b in zip(self.splits().values(), other.splits().values()):
            if len(a) != len(b) or not all(x.content_equal(y) for x, y in zip(a, b)):
                return False
        return True


_SPLIT_CODE = {"train": 1, "val": 2, "test": 3}


def domain_seed(spec: MotherSpec, cfg: LtConfig, split: str, index: int) -> list[int]:
    return [spec.rng_seed, cfg.seed, _SPLIT_CODE[split], index]


def generate_lt_benchmark(spec: MotherSpec, cfg: LtConfig) -> BenchmarkSplit:
    C = spec.base_classes
    if cfg.K > C:
        raise ConfigError(f"K={cfg.K} exceeds base_classes={C}")
    if cfg.fit_size is not None and cfg.fit_size < 1:
        raise ConfigError("fit_size must be positive")
    out = BenchmarkSplit(spec.input_dim, C)
    seen: set[int] = set()
    eval_per = {"train": cfg.train_eval_per_class, "val": cfg.val_per_class, "test": cfg.test_per_class}
    n_domains = {"train": cfg.N, "val": cfg.n_val_domains, "test": cfg.n_test_domains}
    for split in SPLITS:
        pool = list(range(C)) if split == "train" else sorted(seen)
        for i in range(n_domains[split]):
            seed = domain_seed(spec, cfg, split, i)
            rng = np.random.default_rng(seed + [0])
            head = set(rng.choice(pool, size=min(cfg.K, len(pool)), replace=False).tolist())
            counts = lt_counts(pool, head, cfg.A, cfg.f)
            if cfg.fit_size is not None:
                counts = rescale_counts(counts, cfg.fit_size)
            if not counts:
                raise ConfigError("configuration yields an empty domain")
            d = sample_domain(
                spec, counts, seed + [1], lt_counts(pool, head, eval_per[split], cfg.f), f"{split}{i:03d}"
            )
            if split == "train":
                seen.update(counts)
            out.splits()[split].append(d)
    out.validate()
    return out


def _dumps_line(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def write_dataset(split: BenchmarkSplit, path) -> None:
    header = {
        "format": DATA_FORMAT,
        "dim": split.dim,
        "classes": split.classes,
        "splits": {name: [d.domain_id for d in ds] for name, ds in split.splits().items()},
    }
    with open(path, "w") as fh:
        fh.write(_dumps_line(header) + "\n")
        for name, domains in split.splits().items():
            for d in domains:
                for sub, xs, ys in (("fit", d.x_fit, d.y_fit), ("eval", d.x_eval, d.y_eval)):
                    for x, y in zip(xs, ys):
                        rec = {"domain": d.domain_id, "split": name, "sub": sub, "x": x.tolist(), "y": int(y)}
                        fh.write(_dumps_line(rec) + "\n")


def load_external_dataset(path) -> BenchmarkSplit:
    """Parse and validate a JSON-lines dataset file."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetParseError(1, "empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetParseError(1, f"header is not JSON (offset {e.pos})") from None
    if not isinstance(header, dict) or header.get("format") != DATA_FORMAT:
        raise DatasetParseError(1, f"header format must be {DATA_FORMAT!r}")
    try:
        dim, classes, splits = int(header["dim"]), int(header["classes"]), header["splits"]
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetParseError(1, f"bad header field: {e}") from None
    owner: dict[str, str] = {}
    for name in SPLITS:
        for did in splits.get(name, []):
            if did in owner:
                raise DatasetValidationError(f"domain {did} listed in more than one split")
            owner[did] = name
    if not owner:
        raise DatasetValidationError("empty domain list")
    rows: dict[tuple[str, str], tuple[list, list]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            did, name, sub = rec["domain"], rec["split"], rec["sub"]
            x, y = rec["x"], rec["y"]
        except json.JSONDecodeError as e:
            raise DatasetParseError(lineno, f"invalid JSON at offset {e.pos}") from None
        except (KeyError, TypeError) as e:
            raise DatasetParseError(lineno, f"missing field {e}") from None
        if owner.get(did) != name:
            raise DatasetValidationError(f"line {lineno}: domain {did} not declared in split {name}")
        if sub not in ("fit", "eval"):
            raise DatasetParseError(lineno, f"sub must be fit or eval, got {sub!r}")
        if not isinstance(y, int) or not isinstance(x, list) or len(x) != dim:
            raise DatasetParseError(lineno, "x must be a list of length dim and y an int")
        xs, ys = rows.setdefault((did, sub), ([], []))
        xs.append(x)
        ys.append(y)

    def arrays(did, sub):
        xs, ys = rows.get((did, sub), ([], []))
        return np.asarray(xs, dtype=np.float64).reshape(-1, dim), np.asarray(ys, dtype=np.int64)

    out = BenchmarkSplit(dim, classes)
    for name in SPLITS:
        for did in splits.get(name, []):
            xf, yf = arrays(did, "fit")
            xe, ye = arrays(did, "eval")
            if not len(yf) and not len(ye):
                raise DatasetValidationError(f"domain {did} has no samples")
            out.splits()[name].append(DomainDataset(did, xf, yf, xe, ye))
    out.validate()
    return out
