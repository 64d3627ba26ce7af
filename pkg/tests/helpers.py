"""Brute-force oracles and random gradient-check instances shared by the
unit tests and the acceptance suite."""
from __future__ import annotations

import math
import statistics

import numpy as np

from domgen.adaptive import AdaptiveModel, Penalty, adaptive_loss_and_grads, coral_penalty, mmd_penalty
from domgen.numcore import MlpParams, finite_diff_grad, init_mlp, mlp_forward, relative_error
from domgen.protoembed import proto_loss_and_grads


# PASS/FAIL lines from the acceptance suite, echoed in the pytest summary.
ACCEPTANCE: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE.append(line)
    print(line, flush=True)
    return ok


def brute_median_bandwidth(groups) -> float:
    pts = [p for g in groups for p in g]
    dists = []
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            dists.append(math.sqrt(sum((a - b) ** 2 for a, b in zip(pts[i], pts[j]))))
    return statistics.median(dists)


def brute_mmd(groups, h: float | None = None) -> float:
    if h is None:
        h = brute_median_bandwidth(groups)

    def k(a, b):
        return math.exp(-sum((u - v) ** 2 for u, v in zip(a, b)) / (2 * h * h))

    def mean_k(A, B):
        return sum(k(a, b) for a in A for b in B) / (len(A) * len(B))

    vals = []
    for s in range(len(groups)):
        for t in range(s + 1, len(groups)):
            S, T = groups[s], groups[t]
            vals.append(mean_k(S, S) + mean_k(T, T) - 2 * mean_k(S, T))
    return sum(vals) / len(vals)


def brute_cov(X):
    m, d = len(X), len(X[0])
    mean = [sum(X[i][c] for i in range(m)) / m for c in range(d)]
    return [[sum((X[i][a] - mean[a]) * (X[i][b] - mean[b]) for i in range(m)) / (m - 1) for b in range(d)] for a in range(d)]


def brute_coral(groups) -> float:
    d = len(groups[0][0])
    covs = [brute_cov(g) for g in groups]
    vals = []
    for s in range(len(groups)):
        for t in range(s + 1, len(groups)):
            fro = sum((covs[s][a][b] - covs[t][a][b]) ** 2 for a in range(d) for b in range(d))
            vals.append(fro / (4 * d * d))
    return sum(vals) / len(vals)


def tiny_groups(seed: int, k: int = 2, m: int = 2, d: int = 2):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((m, d)) for _ in range(k)]


# --- gradient instances -----------------------------------------------------------
# Each returns the worst relative error between analytic and central-difference
# gradients over every parameter (or feature) entry.
#
# The difference quotients are taken on an extended-precision copy of the
# parameters. Several gradient entries are exactly zero by symmetry (the
# prototypical loss ignores a common shift of all embeddings, so the last bias
# gets no gradient). In float64 one ulp of the loss divided by 2h is already
# ~1e-11, which the 1e-8 floor of the relative error turns into 1e-3; the
# extended copy rounds both sides to the same double instead.
# Instances with a ReLU pre-activation closer than KINK_MARGIN to zero are
# redrawn: central differences are meaningless across the kink.

KINK_MARGIN = 1e-3
H = 1e-5


def extended(p: MlpParams) -> MlpParams:
    return MlpParams(
        [w.astype(np.longdouble) for w in p.weights], [b.astype(np.longdouble) for b in p.biases], p.output_relu
    )


def fd(f, p: MlpParams) -> MlpParams:
    return finite_diff_grad(f, extended(p), H)


def kink_free(net: MlpParams, batch: np.ndarray) -> bool:
    _, cache = mlp_forward(net, batch)
    return all(float(np.min(np.abs(z))) >= KINK_MARGIN for z in cache.pre)


def _draw(seed: int, build):
    """First kink-free instance from the seed's stream of attempts."""
    for attempt in range(100):
        inst = build(np.random.default_rng([seed, attempt]))
        if inst is not None:
            return inst
    raise RuntimeError("no kink-free instance found")


def _feature_fd(fn, groups, h=H):
    out = []
    for g in groups:
        num = np.zeros_like(g)
        for idx in np.ndindex(g.shape):
            old = g[idx]
            g[idx] = old + h
            fp = fn(groups)
            g[idx] = old - h
            fm = fn(groups)
            g[idx] = old
            num[idx] = (fp - fm) / (2 * h)
        out.append(num)
    return out


def median_is_smooth(groups) -> bool:
    """The median-heuristic bandwidth is piecewise smooth; it has a kink
    wherever the distances next to the median swap order."""
    pooled = np.vstack(groups)
    iu, ju = np.triu_indices(len(pooled), k=1)
    r = np.sort(np.linalg.norm(pooled[iu] - pooled[ju], axis=1))
    m = len(r)
    near = np.diff(r)[max(m // 2 - 2, 0) : m // 2 + 1]
    return bool(np.min(near) >= KINK_MARGIN)


def penalty_instance(seed: int, kind: str, gamma: float = 1.0) -> float:
    fn = mmd_penalty if kind == "mmd" else coral_penalty

    def build(rng):
        k = int(rng.integers(2, 4))
        d = int(rng.integers(2, 9))
        groups = [rng.standard_normal((int(rng.integers(3, 6)), d)) for _ in range(k)]
        return groups if kind != "mmd" or median_is_smooth(groups) else None

    groups = _draw(seed, build)
    _, grads = fn(groups)
    num = _feature_fd(lambda gs: gamma * fn(gs)[0], groups)
    return max(relative_error(gamma * a, b) for a, b in zip(grads, num))


def random_adaptive(rng, d: int, d_D: int, classes: int) -> AdaptiveModel:
    d_feat = int(rng.integers(2, 7))
    d_mlp = int(rng.integers(2, 7))
    f_ft = init_mlp([d, d_feat], rng, output_relu=True)
    f_mlp = init_mlp([d_feat + d_D, d_mlp, classes], rng)
    f_ft.biases = [0.1 * rng.standard_normal(b.shape) for b in f_ft.biases]
    f_mlp.biases = [0.1 * rng.standard_normal(b.shape) for b in f_mlp.biases]
    return AdaptiveModel(f_ft, f_mlp, d_D, classes)


def adaptive_instance(seed: int, penalty: Penalty = Penalty.NONE, gamma: float = 0.0) -> float:
    def build(rng):
        d = int(rng.integers(2, 9))
        d_D = int(rng.integers(0, 5))
        classes = int(rng.integers(2, 5))
        model = random_adaptive(rng, d, d_D, classes)
        n_dom, per = 2, 4
        x = rng.standard_normal((n_dom * per, d))
        mu = np.repeat(rng.standard_normal((n_dom, d_D)), per, axis=0) if d_D else None
        feat, _ = mlp_forward(model.f_ft, x)
        joined = np.hstack([feat, mu]) if d_D else feat
        if not (kink_free(model.f_ft, x) and kink_free(model.f_mlp, joined)):
            return None
        y = rng.integers(0, classes, n_dom * per)
        return model, x, mu, y, np.repeat(np.arange(n_dom), per)

    model, x, mu, y, dom = _draw(seed, build)

    def loss(ft, mlp):
        return adaptive_loss_and_grads(AdaptiveModel(ft, mlp, model.d_D, model.num_classes), x, mu, y, dom, penalty, gamma).loss

    step = adaptive_loss_and_grads(model, x, mu, y, dom, penalty, gamma)
    num_ft = fd(lambda p: loss(p, model.f_mlp), model.f_ft)
    num_mlp = fd(lambda p: loss(model.f_ft, p), model.f_mlp)
    pairs = list(zip(step.g_ft.arrays(), num_ft.arrays())) + list(zip(step.g_mlp.arrays(), num_mlp.arrays()))
    return max(relative_error(a, np.asarray(b, dtype=np.float64)) for a, b in pairs)


def proto_instance(seed: int) -> float:
    def build(rng):
        d = int(rng.integers(2, 9))
        dims = [d] + [int(rng.integers(2, 7)) for _ in range(int(rng.integers(1, 4)))]
        net = init_mlp(dims, rng, output_relu=True)
        net.biases = [0.1 * rng.standard_normal(b.shape) + 0.1 for b in net.biases]
        k = int(rng.integers(2, 4))
        support = [rng.standard_normal((3, d)) for _ in range(k)]
        queries = [rng.standard_normal((2, d)) for _ in range(k)]
        return (net, support, queries) if kink_free(net, np.vstack(support + queries)) else None

    net, support, queries = _draw(seed, build)
    _, g = proto_loss_and_grads(net, support, queries)
    num = fd(lambda p: proto_loss_and_grads(p, support, queries)[0], net)
    return max(relative_error(a, np.asarray(b, dtype=np.float64)) for a, b in zip(g.arrays(), num.arrays()))
