"""Domain-adaptive classifier trained on prototype-augmented inputs.

The model is ``f_mlp(concat(f_ft(x), mu))``. Optional MMD or CORAL
penalties act on the hidden layer of ``f_mlp``, grouped by training domain.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .numcore import (
    MlpParams,
    NumericError,
    SgdConfig,
    ShapeError,
    cross_entropy_loss,
    init_mlp,
    mlp_backward,
    mlp_forward,
    params_from_dict,
    params_to_dict,
    sgd_step,
)
from .protoembed import ConfigError, DomainPrototype

MODEL_FORMAT = "domgen-model-v1"


class Penalty(str, enum.Enum):
    NONE = "None"
    MMD = "MMD"
    CORAL = "CORAL"


class AugmentedSample(NamedTuple):
    x: np.ndarray
    mu: np.ndarray
    y: int


@dataclass
class AugmentedDataset:
    """Column-wise storage of (x, mu, y) triples plus each row's domain index."""

    x: np.ndarray
    mu: np.ndarray
    y: np.ndarray
    domain: np.ndarray
    domain_ids: list[str]

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> AugmentedSample:
        return AugmentedSample(self.x[i], self.mu[i], int(self.y[i]))

    @property
    def d_D(self) -> int:
        return self.mu.shape[1]


def build_augmented(domains: Sequence, prototypes: Sequence[DomainPrototype] | None) -> AugmentedDataset:
    """Attach each domain's prototype to every one of its fit samples.

    With ``prototypes=None`` the rows carry an empty prototype (plain ERM).
    """
    by_id = {p.domain_id: p for p in prototypes} if prototypes is not None else None
    xs, mus, ys, dom = [], [], [], []
    for i, d in enumerate(domains):
        n = len(d.y_fit)
        if by_id is None:
            mu = np.zeros(0)
        elif d.domain_id not in by_id:
            raise ConfigError(f"no prototype for domain {d.domain_id}")
        else:
            mu = by_id[d.domain_id].mu
        xs.append(d.x_fit)
        mus.append(np.tile(mu, (n, 1)))
        ys.append(d.y_fit)
        dom.append(np.full(n, i))
    if not xs:
        raise ConfigError("no domains to augment")
    return AugmentedDataset(
        np.vstack(xs), np.vstack(mus), np.concatenate(ys), np.concatenate(dom), [d.domain_id for d in domains]
    )


@dataclass
class AdaptiveModel:
    f_ft: MlpParams
    f_mlp: MlpParams
    d_D: int
    num_classes: int

    def __post_init__(self):
        if self.f_ft.out_dim + self.d_D != self.f_mlp.in_dim:
            raise ShapeError(
                f"f_mlp input {self.f_mlp.in_dim} != feature {self.f_ft.out_dim} + d_D {self.d_D}"
            )
        if self.f_mlp.out_dim != self.num_classes:
            raise ShapeError("f_mlp output width must equal num_classes")

    @property
    def uses_prototype(self) -> bool:
        return self.d_D > 0

    def equals(self, other: "AdaptiveModel") -> bool:
        return (
            self.d_D == other.d_D
            and self.num_classes == other.num_classes
            and self.f_ft.equals(other.f_ft)
            and self.f_mlp.equals(other.f_mlp)
        )


@dataclass
class TrainConfig:
    T: int = 1500
    batch_per_domain: int = 16
    sgd: SgdConfig = field(default_factory=lambda: SgdConfig(learning_rate=0.05, weight_decay=1e-5))
    penalty: Penalty = Penalty.NONE
    gamma: float = 1.0
    mmd_bandwidth: float | None = None  # None: median heuristic
    d_feat: int = 64
    d_mlp: int = 64

    def __post_init__(self):
        self.penalty = Penalty(self.penalty)
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if self.T < 0 or self.batch_per_domain < 1:
            raise ConfigError("T must be >= 0 and batch_per_domain >= 1")
        if self.mmd_bandwidth is not None and not self.mmd_bandwidth > 0:
            raise ConfigError("fixed MMD bandwidth must be positive")


def init_adaptive(input_dim: int, d_D: int, num_classes: int, cfg: TrainConfig, rng: np.random.Generator) -> AdaptiveModel:
    f_ft = init_mlp([input_dim, cfg.d_feat], rng, output_relu=True)
    f_mlp = init_mlp([cfg.d_feat + d_D, cfg.d_mlp, num_classes], rng)
    return AdaptiveModel(f_ft, f_mlp, d_D, num_classes)


def _split_head(p: MlpParams) -> tuple[MlpParams, MlpParams]:
    trunk = MlpParams(p.weights[:-1], p.biases[:-1], output_relu=True)
    head = MlpParams(p.weights[-1:], p.biases[-1:], p.output_relu)
    return trunk, head


def _join(model: AdaptiveModel, x: np.ndarray, mu: np.ndarray | None) -> np.ndarray:
    if mu is None or not model.uses_prototype:
        return np.zeros((len(x), 0))
    mu = np.asarray(mu, dtype=np.float64)
    if mu.ndim != 2 or mu.shape != (len(x), model.d_D):
        raise ShapeError(f"mu batch {mu.shape} does not match ({len(x)}, {model.d_D})")
    return mu


def adaptive_forward(model: AdaptiveModel, x_batch: np.ndarray, mu_batch: np.ndarray | None) -> np.ndarray:
    """Logits of ``f_mlp(concat(f_ft(x), mu))``; ``mu`` is ignored by models
    trained without prototypes."""
    mu = _join(model, x_batch, mu_batch)
    feat, _ = mlp_forward(model.f_ft, x_batch)
    logits, _ = mlp_forward(model.f_mlp, np.hstack([feat, mu]))
    return logits


# --- invariance penalties -------------------------------------------------


def _pair_dist(p: np.ndarray) -> np.ndarray:
    diff = p[:, None, :] - p[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def median_bandwidth(pooled: np.ndarray) -> tuple[float, list[tuple[int, int, float]]]:
    """Median of the distinct pairwise Euclidean distances, with the pair(s)
    that define it and their weights (for differentiating through it)."""
    n = len(pooled)
    iu, ju = np.triu_indices(n, k=1)
    if not len(iu):
        return 1.0, []
    r = np.sqrt(_pair_dist(pooled)[iu, ju])
    order = np.argsort(r, kind="stable")
    m = len(r)
    picks = [(order[m // 2], 1.0)] if m % 2 else [(order[m // 2 - 1], 0.5), (order[m // 2], 0.5)]
    h = float(sum(w * r[k] for k, w in picks))
    if h <= 0:
        return 1.0, []
    return h, [(int(iu[k]), int(ju[k]), w) for k, w in picks]


def _stack_groups(groups: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    if len(groups) < 2:
        raise ValueError("penalty needs at least two domains")
    if any(len(g) == 0 for g in groups):
        raise ValueError("empty domain batch")
    labels = np.concatenate([np.full(len(g), k) for k, g in enumerate(groups)])
    return np.vstack(groups), labels


def mmd_penalty(
    features_by_domain: Sequence[np.ndarray], bandwidth: float | None = None
) -> tuple[float, list[np.ndarray]]:
    """Mean over unordered domain pairs of the (biased) Gaussian-kernel MMD².

    ``bandwidth=None`` uses the median heuristic on the pooled batch, and the
    gradient includes the bandwidth's dependence on the features.
    """
    pooled, labels = _stack_groups(features_by_domain)
    sizes = np.array([len(g) for g in features_by_domain], dtype=np.float64)
    k = len(features_by_domain)
    n_pairs = k * (k - 1) / 2
    # Coefficients W so that value = sum(W * K).
    inv = 1.0 / sizes[labels]
    same = labels[:, None] == labels[None, :]
    W = np.where(same, (k - 1) * inv[:, None] * inv[None, :], -inv[:, None] * inv[None, :]) / n_pairs
    if bandwidth is None:
        h, picks = median_bandwidth(pooled)
    else:
        h, picks = float(bandwidth), []
    D = _pair_dist(pooled)
    K = np.exp(-D / (2 * h * h))
    value = float(np.sum(W * K))
    G = -W * K / (2 * h * h)
    grad = 4.0 * (G.sum(axis=1, keepdims=True) * pooled - G @ pooled)
    if picks:
        dh = float(np.sum(W * K * D)) / h**3
        for i, j, w in picks:
            diff = pooled[i] - pooled[j]
            dr = diff / np.linalg.norm(diff)
            grad[i] += dh * w * dr
            grad[j] -= dh * w * dr
    return value, [grad[labels == g] for g in range(k)]


def coral_penalty(features_by_domain: Sequence[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    """Mean over unordered domain pairs of ||C_s - C_t||_F^2 / (4 d^2)."""
    _stack_groups(features_by_domain)
    if any(len(g) < 2 for g in features_by_domain):
        raise ValueError("CORAL needs at least two points per domain")
    d = features_by_domain[0].shape[1]
    k = len(features_by_domain)
    n_pairs = k * (k - 1) / 2
    centred = [g - g.mean(axis=0) for g in features_by_domain]
    covs = [c.T @ c / (len(c) - 1) for c in centred]
    scale = 1.0 / (4 * d * d * n_pairs)
    value = 0.0
    dcov = [np.zeros((d, d)) for _ in range(k)]
    for s in range(k):
        for t in range(s + 1, k):
            diff = covs[s] - covs[t]
            value += float(np.sum(diff * diff))
            dcov[s] += 2 * diff
            dcov[t] -= 2 * diff
    grads = [2.0 * c @ (scale * g) / (len(c) - 1) for c, g in zip(centred, dcov)]
    return value * scale, grads


# --- training ---------------------------------------------------------------


@dataclass
class StepResult:
    loss: float
    ce: float
    penalty: float
    g_ft: MlpParams
    g_mlp: MlpParams


def adaptive_loss_and_grads(
    model: AdaptiveModel,
    x: np.ndarray,
    mu: np.ndarray | None,
    y: np.ndarray,
    domain: np.ndarray | None = None,
    penalty: Penalty = Penalty.NONE,
    gamma: float = 0.0,
    bandwidth: float | None = None,
) -> StepResult:
    mu = _join(model, x, mu)
    feat, c_ft = mlp_forward(model.f_ft, x)
    trunk, head = _split_head(model.f_mlp)
    hidden, c_trunk = mlp_forward(trunk, np.hstack([feat, mu]))
    logits, c_head = mlp_forward(head, hidden)
    ce, dlogits = cross_entropy_loss(logits, y)
    g_head, dhidden = mlp_backward(head, c_head, dlogits)
    pen = 0.0
    penalty = Penalty(penalty)
    if penalty is not Penalty.NONE:
        groups = [np.flatnonzero(domain == g) for g in np.unique(domain)]
        feats = [hidden[idx] for idx in groups]
        if penalty is Penalty.MMD:
            pen, dfeats = mmd_penalty(feats, bandwidth)
        else:
            pen, dfeats = coral_penalty(feats)
        dpen = np.zeros_like(hidden)
        for idx, g in zip(groups, dfeats):
            dpen[idx] = g
        dhidden = dhidden + gamma * dpen
    g_trunk, dz = mlp_backward(trunk, c_trunk, dhidden)
    g_ft, _ = mlp_backward(model.f_ft, c_ft, dz[:, : feat.shape[1]])
    g_mlp = MlpParams(g_trunk.weights + g_head.weights, g_trunk.biases + g_head.biases, model.f_mlp.output_relu)
    return StepResult(ce + gamma * pen, ce, pen, g_ft, g_mlp)


def adaptive_train(
    data: AugmentedDataset,
    cfg: TrainConfig,
    num_classes: int | None = None,
    on_round: Callable[[int, float], None] | None = None,
) -> AdaptiveModel:
    """One sub-batch per training domain per round; deterministic given seed."""
    if len(data) == 0:
        raise ConfigError("empty training set")
    num_classes = num_classes if num_classes is not None else int(data.y.max()) + 1
    rng = np.random.default_rng(cfg.sgd.rng_seed)
    model = init_adaptive(data.x.shape[1], data.d_D, num_classes, cfg, rng)
    rows = [np.flatnonzero(data.domain == g) for g in np.unique(data.domain)]
    use_penalty = cfg.penalty is not Penalty.NONE and len(rows) >= 2
    for t in range(cfg.T):
        idx = np.concatenate(
            [r[rng.choice(len(r), size=cfg.batch_per_domain, replace=len(r) < cfg.batch_per_domain)] for r in rows]
        )
        step = adaptive_loss_and_grads(
            model,
            data.x[idx],
            data.mu[idx],
            data.y[idx],
            data.domain[idx],
            cfg.penalty if use_penalty else Penalty.NONE,
            cfg.gamma,
            cfg.mmd_bandwidth,
        )
        if not np.isfinite(step.loss):
            raise NumericError(f"non-finite loss at round {t}")
        try:
            f_ft = sgd_step(model.f_ft, step.g_ft, cfg.sgd)
            f_mlp = sgd_step(model.f_mlp, step.g_mlp, cfg.sgd)
        except NumericError as e:
            raise NumericError(f"round {t}: {e}") from None
        model = AdaptiveModel(f_ft, f_mlp, model.d_D, num_classes)
        if on_round is not None:
            on_round(t, step.loss)
    return model


def predict_logits(model: AdaptiveModel, prototype: DomainPrototype | None, x_batch: np.ndarray) -> np.ndarray:
    if model.uses_prototype:
        if prototype is None or len(prototype.mu) != model.d_D:
            raise ShapeError(f"model expects a prototype of length {model.d_D}")
        mu = np.tile(prototype.mu, (len(x_batch), 1))
    else:
        mu = None
    return adaptive_forward(model, x_batch, mu)


def adaptive_infer(model: AdaptiveModel, prototype: DomainPrototype | None, x_batch: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    return np.argmax(predict_logits(model, prototype, x_batch), axis=1)


def model_to_dict(model: AdaptiveModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "d_D": model.d_D,
        "num_classes": model.num_classes,
        "f_ft": params_to_dict(model.f_ft),
        "f_mlp": params_to_dict(model.f_mlp),
    }


def model_from_dict(doc: dict) -> AdaptiveModel:
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"expected model format {MODEL_FORMAT!r}")
    return AdaptiveModel(
        params_from_dict(doc["f_ft"]), params_from_dict(doc["f_mlp"]), int(doc["d_D"]), int(doc["num_classes"])
    )


def save_model(model: AdaptiveModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path) -> AdaptiveModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
