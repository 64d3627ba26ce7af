"""Unsupervised domain embeddings learned with a prototypical objective.

Domain identities play the role of class labels: each round samples a few
training domains, builds a support-set prototype for each, and pushes query
embeddings toward their own domain's prototype.
"""
from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numcore import (
    MlpParams,
    SgdConfig,
    ShapeError,
    cross_entropy_loss,
    init_mlp,
    mlp_backward,
    mlp_forward,
    sgd_step,
    softmax,
)


class ConfigError(ValueError):
    pass


class EmbeddingVariant(str, enum.Enum):
    PROTOTYPE = "Prototype"
    MEAN_FEATURE = "MeanFeature"
    SOFTMAX_HEAD = "SoftmaxHead"
    RANDOM_AT_INFERENCE = "RandomAtInference"
    NONE = "None"


@dataclass
class ProtoConfig:
    d_D: int = 32
    N_t: int = 4
    N_s: int = 16
    N_q: int = 16
    T: int = 300
    hidden: tuple[int, ...] = (64,)
    sgd: SgdConfig = field(default_factory=lambda: SgdConfig(learning_rate=0.05, weight_decay=1e-5))
    mixup_enabled: bool = False
    mixup_ratio_range: tuple[float, float] = (0.2, 0.8)

    def __post_init__(self):
        if self.d_D < 1 or self.N_t < 1 or self.N_s < 1 or self.N_q < 1 or self.T < 0:
            raise ConfigError("d_D, N_t, N_s, N_q must be >= 1 and T >= 0")
        lo, hi = self.mixup_ratio_range
        if self.mixup_enabled and not 0 < lo < hi < 1:
            raise ConfigError("mixup ratio range must satisfy 0 < lo < hi < 1")


def support_query_split(batch_per_domain: int, n_domains: int) -> tuple[int, int]:
    """Support/query sizes for a per-domain batch: half support for small
    domain counts, 80% support for more than ten domains."""
    frac = 0.5 if n_domains <= 10 else 0.8
    n_s = max(1, int(round(batch_per_domain * frac)))
    return n_s, max(1, batch_per_domain - n_s)


@dataclass
class DomainPrototype:
    domain_id: str
    mu: np.ndarray
    n_points: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        if self.n_points < 1:
            raise ValueError("prototype needs at least one point")
        if not np.all(np.isfinite(self.mu)):
            raise ValueError(f"prototype {self.domain_id}: non-finite entries")


@dataclass
class FeatureVarianceReport:
    per_domain: dict[str, float]
    max: float
    mean: float


def _points(domain) -> np.ndarray:
    if isinstance(domain, np.ndarray):
        return domain
    return domain.x_fit


def _domain_id(domain, i: int) -> str:
    return getattr(domain, "domain_id", str(i))


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def domain_membership_probs(embeddings: np.ndarray, prototypes: Sequence[DomainPrototype]) -> np.ndarray:
    if not prototypes:
        raise ShapeError("need at least one prototype")
    mus = np.vstack([p.mu for p in prototypes])
    if embeddings.ndim != 2 or embeddings.shape[1] != mus.shape[1]:
        raise ShapeError(f"query embeddings {embeddings.shape} vs prototype dim {mus.shape[1]}")
    return softmax(-squared_distances(embeddings, mus))


def prototypical_loss(
    support: Sequence[np.ndarray], queries: Sequence[np.ndarray]
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean -log p(own domain) over all queries.

    ``support[j]`` / ``queries[j]`` are embeddings of domain j. Returns the
    loss and its gradients w.r.t. every support and query embedding.
    """
    mus = np.vstack([s.mean(axis=0) for s in support])
    q = np.vstack(queries)
    labels = np.concatenate([np.full(len(x), j) for j, x in enumerate(queries)])
    loss, dlogits = cross_entropy_loss(-squared_distances(q, mus), labels)
    ddist = -dlogits
    dq = 2.0 * (ddist.sum(axis=1, keepdims=True) * q - ddist @ mus)
    dmu = 2.0 * (ddist.sum(axis=0)[:, None] * mus - ddist.T @ q)
    dsupport = [np.repeat(dmu[j : j + 1] / len(s), len(s), axis=0) for j, s in enumerate(support)]
    offsets = np.cumsum([0] + [len(x) for x in queries])
    dqueries = [dq[offsets[j] : offsets[j + 1]] for j in range(len(queries))]
    return loss, dsupport, dqueries


def mixup_domains(
    a: np.ndarray, b: np.ndarray, ratio: float, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Blend two equally sized batches row by row: ratio*a + (1-ratio)*b.

    With ``rng`` both batches are shuffled independently before pairing.
    """
    if a.shape != b.shape:
        raise ShapeError(f"mixup batches differ in shape: {a.shape} vs {b.shape}")
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    if rng is not None:
        a = a[rng.permutation(len(a))]
        b = b[rng.permutation(len(b))]
    return ratio * a + (1.0 - ratio) * b


def _mixup_pairs(k: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    pairs = list(itertools.combinations(range(k), 2))
    if not pairs:
        return []
    out = []
    while len(out) < k:
        take = min(k - len(out), len(pairs))
        idx = rng.choice(len(pairs), size=take, replace=False)
        out.extend(pairs[i] for i in idx)
    return out


def init_embedding_net(input_dim: int, cfg: ProtoConfig, rng: np.random.Generator) -> MlpParams:
    # ReLU after the embedding layer as well.
    return init_mlp([input_dim, *cfg.hidden, cfg.d_D], rng, output_relu=True)


def _check_domains(points: list[np.ndarray], cfg: ProtoConfig) -> None:
    if len(points) < 2:
        raise ConfigError("prototypical training needs at least two domains")
    need = cfg.N_s + cfg.N_q
    for i, x in enumerate(points):
        if len(x) < need:
            raise ConfigError(f"domain {i} has {len(x)} points, needs >= N_s + N_q = {need}")
    if len({x.shape[1] for x in points}) != 1:
        raise ShapeError("domains disagree on input dimension")


def _sample_round(points, cfg: ProtoConfig, rng: np.random.Generator):
    k = min(cfg.N_t, len(points))
    chosen = rng.choice(len(points), size=k, replace=False)
    batches = []
    for d in chosen:
        idx = rng.choice(len(points[d]), size=cfg.N_s + cfg.N_q, replace=False)
        batches.append(points[d][idx])
    if cfg.mixup_enabled:
        lo, hi = cfg.mixup_ratio_range
        for a, b in _mixup_pairs(k, rng):
            batches.append(mixup_domains(batches[a], batches[b], rng.uniform(lo, hi), rng))
    return [x[: cfg.N_s] for x in batches], [x[cfg.N_s :] for x in batches]


def proto_train(
    domains: Sequence,
    cfg: ProtoConfig,
    on_round: Callable[[int, float], None] | None = None,
) -> MlpParams:
    """Train the embedding network; deterministic given ``cfg.sgd.rng_seed``."""
    points = [_points(d) for d in domains]
    _check_domains(points, cfg)
    rng = np.random.default_rng(cfg.sgd.rng_seed)
    net = init_embedding_net(points[0].shape[1], cfg, rng)
    for t in range(cfg.T):
        support, queries = _sample_round(points, cfg, rng)
        net, loss = _proto_step(net, support, queries, cfg.sgd)
        if on_round is not None:
            on_round(t, loss)
    return net


def _proto_step(net: MlpParams, support, queries, sgd: SgdConfig) -> tuple[MlpParams, float]:
    loss, grads = proto_loss_and_grads(net, support, queries)
    return sgd_step(net, grads, sgd), loss


def proto_loss_and_grads(net: MlpParams, support, queries) -> tuple[float, MlpParams]:
    batch = np.vstack(list(support) + list(queries))
    emb, cache = mlp_forward(net, batch)
    sizes = [len(x) for x in support] + [len(x) for x in queries]
    parts = np.split(emb, np.cumsum(sizes)[:-1])
    k = len(support)
    loss, ds, dq = prototypical_loss(parts[:k], parts[k:])
    grads, _ = mlp_backward(net, cache, np.vstack(ds + dq))
    return loss, grads


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Lexicographic row order, so means do not depend on input order."""
    return points[np.lexsort(points.T[::-1])]


def compute_prototype(net: MlpParams, points: np.ndarray, domain_id: str = "") -> DomainPrototype:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ValueError("compute_prototype needs a non-empty 2-D batch")
    emb, _ = mlp_forward(net, canonical_order(points))
    return DomainPrototype(domain_id, emb.sum(axis=0) / len(points), len(points))


def feature_variance(net: MlpParams, domains: Sequence) -> FeatureVarianceReport:
    per = {}
    for i, d in enumerate(domains):
        emb, _ = mlp_forward(net, _points(d))
        per[_domain_id(d, i)] = float(np.mean(np.sum((emb - emb.mean(axis=0)) ** 2, axis=1)))
    vals = list(per.values())
    return FeatureVarianceReport(per, max(vals), float(np.mean(vals)))


def softmax_head_train(domains: Sequence, cfg: ProtoConfig) -> MlpParams:
    """Embedding-net topology plus a linear domain-ID head, trained with plain
    cross-entropy on domain labels. Returns only the trunk."""
    points = [_points(d) for d in domains]
    _check_domains(points, cfg)
    rng = np.random.default_rng(cfg.sgd.rng_seed)
    trunk = init_embedding_net(points[0].shape[1], cfg, rng)
    head = init_mlp([cfg.d_D, len(points)], rng)
    full = MlpParams(trunk.weights + head.weights, trunk.biases + head.biases)
    per = cfg.N_s + cfg.N_q
    for _ in range(cfg.T):
        chosen = rng.choice(len(points), size=min(cfg.N_t, len(points)), replace=False)
        xs, ys = [], []
        for d in chosen:
            xs.append(points[d][rng.choice(len(points[d]), size=per, replace=False)])
            ys.append(np.full(per, d))
        logits, cache = mlp_forward(full, np.vstack(xs))
        _, dlogits = cross_entropy_loss(logits, np.concatenate(ys))
        grads, _ = mlp_backward(full, cache, dlogits)
        full = sgd_step(full, grads, cfg.sgd)
    n = len(trunk.weights)
    return MlpParams(full.weights[:n], full.biases[:n], output_relu=True)


@dataclass
class VariantContext:
    """Whatever trained pieces a given embedding variant needs."""

    d_D: int
    proto_net: MlpParams | None = None
    erm_features: MlpParams | None = None
    softmax_trunk: MlpParams | None = None
    donor: DomainPrototype | None = None


def embed_variant(
    variant: EmbeddingVariant, ctx: VariantContext, points: np.ndarray, domain_id: str = ""
) -> DomainPrototype:
    variant = EmbeddingVariant(variant)
    if variant is EmbeddingVariant.NONE:
        return DomainPrototype(domain_id, np.zeros(ctx.d_D), max(1, len(points)))
    if variant is EmbeddingVariant.RANDOM_AT_INFERENCE:
        if ctx.donor is None:
            raise ConfigError("RandomAtInference needs a donor prototype")
        return ctx.donor
    net = {
        EmbeddingVariant.PROTOTYPE: ctx.proto_net,
        EmbeddingVariant.MEAN_FEATURE: ctx.erm_features,
        EmbeddingVariant.SOFTMAX_HEAD: ctx.softmax_trunk,
    }[variant]
    if net is None:
        raise ConfigError(f"{variant.value} variant is missing its trained network")
    return compute_prototype(net, points, domain_id)


def prototypes_to_dict(protos: Sequence[DomainPrototype]) -> dict:
    dims = {len(p.mu) for p in protos}
    if len(dims) > 1:
        raise ShapeError("prototypes disagree on dimension")
    return {
        "d_D": dims.pop() if dims else 0,
        "prototypes": [
            {"domain_id": p.domain_id, "n_points": int(p.n_points), "mu": p.mu.tolist()} for p in protos
        ],
    }


def prototypes_from_dict(doc: dict) -> list[DomainPrototype]:
    out = [DomainPrototype(e["domain_id"], e["mu"], int(e["n_points"])) for e in doc["prototypes"]]
    for p in out:
        if len(p.mu) != doc["d_D"]:
            raise ShapeError(f"prototype {p.domain_id}: length {len(p.mu)} != d_D {doc['d_D']}")
    return out


def save_prototypes(protos: Sequence[DomainPrototype], path) -> None:
    with open(path, "w") as fh:
        json.dump(prototypes_to_dict(protos), fh)


def load_prototypes(path) -> list[DomainPrototype]:
    with open(path) as fh:
        return prototypes_from_dict(json.load(fh))
