"""Dense MLP building blocks: forward/backward passes, losses, SGD and a
finite-difference gradient oracle.

Everything is float64 numpy. Parameters are small immutable-by-convention
values; training loops build new ones through :func:`sgd_step`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass
class MlpParams:
    """Stack of affine layers with ReLU between them.

    ``weights[i]`` has shape (in_dim, out_dim); ``biases[i]`` has shape
    (1, out_dim). The last layer is linear unless ``output_relu`` is set.
    The same structure is used to hold gradients.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_relu: bool = False

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (1, w.shape[1]):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {i}: in-dim {w.shape[0]} != previous out-dim "
                    f"{self.weights[i - 1].shape[1]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [w.shape[1] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.output_relu,
        )

    def zeros_like(self) -> "MlpParams":
        return MlpParams(
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            self.output_relu,
        )

    def congruent(self, other: "MlpParams") -> bool:
        return len(self.weights) == len(other.weights) and all(
            a.shape == b.shape for a, b in zip(self.arrays(), other.arrays())
        )

    def equals(self, other: "MlpParams") -> bool:
        return (
            self.output_relu == other.output_relu
            and self.congruent(other)
            and all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))
        )


@dataclass
class SgdConfig:
    learning_rate: float = 0.05
    weight_decay: float = 1e-5
    rng_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)


def init_mlp(dims: Sequence[int], rng: np.random.Generator, output_relu: bool = False) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    if len(dims) < 2:
        raise ShapeError("need at least input and output dims")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros((1, fan_out)))
    return MlpParams(weights, biases, output_relu)


def mlp_forward(params: MlpParams, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise ShapeError(f"batch must be 2-D, got shape {batch.shape}")
    cache = ForwardCache()
    h = batch
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if h.shape[1] != w.shape[0]:
            raise ShapeError(f"layer {i}: input has {h.shape[1]} cols, weight expects {w.shape[0]}")
        cache.inputs.append(h)
        z = h @ w + b
        cache.pre.append(z)
        h = np.maximum(z, 0.0) if (i < last or params.output_relu) else z
    return h, cache


def mlp_backward(
    params: MlpParams, cache: ForwardCache, dout: np.ndarray
) -> tuple[MlpParams, np.ndarray]:
    """Reverse-mode pass. Returns (parameter gradients, gradient w.r.t. the batch)."""
    if len(cache.pre) != len(params.weights):
        raise ShapeError("cache does not match params (layer count)")
    if dout.shape != cache.pre[-1].shape:
        raise ShapeError(f"upstream gradient {dout.shape} != output {cache.pre[-1].shape}")
    last = len(params.weights) - 1
    gw: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    g = dout
    for i in range(last, -1, -1):
        w = params.weights[i]
        if cache.inputs[i].shape[1] != w.shape[0]:
            raise ShapeError(f"layer {i}: cache input width does not match weight")
        if i < last or params.output_relu:
            g = g * (cache.pre[i] > 0)
        gw[i] = cache.inputs[i].T @ g
        gb[i] = g.sum(axis=0, keepdims=True)
        g = g @ w.T
    return MlpParams(gw, gb, params.output_relu), g


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy_loss(logits: np.ndarray, labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range [0, {k})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    d = np.exp(logp)
    d[rows, labels] -= 1.0
    return loss, d / n


def add_scaled(a: MlpParams, b: MlpParams, scale: float = 1.0) -> MlpParams:
    return MlpParams(
        [x + scale * y for x, y in zip(a.weights, b.weights)],
        [x + scale * y for x, y in zip(a.biases, b.biases)],
        a.output_relu,
    )


def sgd_step(params: MlpParams, grads: MlpParams, cfg: SgdConfig) -> MlpParams:
    if not params.congruent(grads):
        raise ShapeError("gradients are not shape-congruent with params")
    for i, g in enumerate(grads.arrays()):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter block {i}")
    lr, wd = cfg.learning_rate, cfg.weight_decay
    return MlpParams(
        [w - lr * (g + wd * w) for w, g in zip(params.weights, grads.weights)],
        [b - lr * (g + wd * b) for b, g in zip(params.biases, grads.biases)],
        params.output_relu,
    )


def finite_diff_grad(f: Callable[[MlpParams], float], params: MlpParams, h: float = 1e-5) -> MlpParams:
    """Central differences, one scalar parameter at a time."""
    if not h > 0:
        raise ValueError("h must be positive")
    work = params.copy()
    grads = params.zeros_like()
    for arr, garr in zip(work.arrays(), grads.arrays()):
        flat, gflat = arr.reshape(-1), garr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f(work)
            flat[j] = orig - h
            fm = f(work)
            flat[j] = orig
            gflat[j] = (fp - fm) / (2 * h)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def params_to_dict(params: MlpParams) -> dict:
    return {
        "layers": [
            {
                "rows": int(w.shape[0]),
                "cols": int(w.shape[1]),
                "w": w.reshape(-1).tolist(),
                "b": b.reshape(-1).tolist(),
            }
            for w, b in zip(params.weights, params.biases)
        ],
        "activation": "relu",
        "output_activation": "relu" if params.output_relu else "identity",
    }


def params_from_dict(doc: dict) -> MlpParams:
    if doc.get("activation", "relu") != "relu":
        raise ValueError(f"unsupported activation {doc.get('activation')!r}")
    weights, biases = [], []
    for i, layer in enumerate(doc["layers"]):
        rows, cols = int(layer["rows"]), int(layer["cols"])
        w = np.asarray(layer["w"], dtype=np.float64)
        b = np.asarray(layer["b"], dtype=np.float64)
        if w.size != rows * cols or b.size != cols:
            raise ShapeError(f"layer {i}: data length does not match {rows}x{cols}")
        weights.append(w.reshape(rows, cols))
        biases.append(b.reshape(1, cols))
    return MlpParams(weights, biases, doc.get("output_activation", "identity") == "relu")


def save_params(params: MlpParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(params_to_dict(params), fh)


def load_params(path) -> MlpParams:
    with open(path) as fh:
        return params_from_dict(json.load(fh))
