"""Floating-point references used to validate the quantized engine.

Nothing here is used during training. ``bp_grad_fp`` is a hand-written
reverse pass over the dequantized mirror, ``finite_diff_grad`` checks it,
and ``variance_report`` measures the randomized estimator in the smooth
regime where its mean-squared-error law is stated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from qzo.model import Batch, FPModel, QModel, cross_entropy, fp_layer_preact, to_float
from qzo.quant import activate, dequantize, windows
from qzo.zo import (
    choose_mode,
    estimate_grad_np,
    estimate_grad_np_modelwise,
    estimate_grad_wp,
    rge_combine,
)


def fp_loss(fp: FPModel, x, labels) -> float:
    a = np.asarray(x, dtype=np.float64).reshape((len(labels),) + tuple(fp.input_shape))
    for layer in fp.layers:
        a = activate(layer.activation, fp_layer_preact(layer, a))
    return float(np.mean(cross_entropy(a, np.asarray(labels))))


def _col2im(gcols, x_shape, stride, padding):
    n, c, h, w = x_shape
    kh, kw = gcols.shape[-2:]
    ho, wo = gcols.shape[2:4]
    gx = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[..., i, j]
    return gx[:, :, padding:padding + h, padding:padding + w]


def bp_grad_fp(fp: FPModel, x, labels) -> list[tuple[np.ndarray, np.ndarray] | None]:
    """Exact gradients of the mean cross-entropy w.r.t. every layer's (W, b).

    Entries for parameter-free layers are ``None``.
    """
    labels = np.asarray(labels)
    n = labels.size
    a = np.asarray(x, dtype=np.float64).reshape((n,) + tuple(fp.input_shape))
    inputs, preacts = [], []
    for layer in fp.layers:
        inputs.append(a)
        z = fp_layer_preact(layer, a)
        preacts.append(z)
        a = activate(layer.activation, z)
    shifted = a - a.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(n), labels] -= 1.0
    g = p / n

    grads: list = [None] * len(fp.layers)
    for k in range(len(fp.layers) - 1, -1, -1):
        layer, a_in, z = fp.layers[k], inputs[k], preacts[k]
        if layer.activation == "relu":
            g = g * (z > 0)
        if layer.kind == "gap":
            h, w = a_in.shape[2:]
            g = np.broadcast_to(g[:, :, None, None] / (h * w), a_in.shape).copy()
            continue
        wt = layer.weight
        if layer.kind == "fc":
            a2 = a_in.reshape(n, -1)
            grads[k] = (g.T @ a2, g.sum(axis=0))
            g = (g @ wt).reshape(a_in.shape)
        elif layer.kind == "conv2d":
            cols = windows(a_in, wt.shape[2], wt.shape[3], layer.stride, layer.padding)
            grads[k] = (np.einsum("nohw,nchwij->ocij", g, cols), g.sum(axis=(0, 2, 3)))
            gcols = np.einsum("nohw,ocij->nchwij", g, wt)
            g = _col2im(gcols, a_in.shape, layer.stride, layer.padding)
        elif layer.kind == "dwconv2d":
            cols = windows(a_in, wt.shape[2], wt.shape[3], layer.stride, layer.padding)
            grads[k] = (np.einsum("nchw,nchwij->cij", g, cols)[:, None], g.sum(axis=(0, 2, 3)))
            gcols = np.einsum("nchw,cij->nchwij", g, wt[:, 0])
            g = _col2im(gcols, a_in.shape, layer.stride, layer.padding)
        else:
            raise ValueError(f"unsupported layer kind {layer.kind!r}")
    return grads


def central_difference(f, theta, h: float = 1e-5) -> np.ndarray:
    """``(f(theta + h e_j) - f(theta - h e_j)) / 2h`` for every coordinate.

    ``theta`` is modified in place during the sweep and restored.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    theta = np.asarray(theta)
    g = np.zeros(theta.shape, dtype=np.float64)
    flat, gflat = theta.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        up = f(theta)
        flat[j] = orig - h
        down = f(theta)
        flat[j] = orig
        gflat[j] = (up - down) / (2 * h)
    return g


def finite_diff_grad(fp: FPModel, x, labels, h: float = 1e-5) -> list[tuple[np.ndarray, np.ndarray] | None]:
    """Central differences of the mean loss, one coordinate at a time."""
    if not h > 0:
        raise ValueError("h must be positive")
    out: list = []
    for layer in fp.layers:
        if layer.weight is None:
            out.append(None)
            continue
        out.append(tuple(central_difference(lambda _: fp_loss(fp, x, labels), arr, h)
                         for arr in (layer.weight, layer.bias)))
    return out


def cosine_similarity(g, h) -> float:
    g = np.asarray(g, dtype=np.float64).ravel()
    h = np.asarray(h, dtype=np.float64).ravel()
    if g.shape != h.shape:
        raise ValueError(f"length mismatch: {g.size} vs {h.size}")
    ng, nh = np.linalg.norm(g), np.linalg.norm(h)
    if ng == 0 or nh == 0:
        return 0.0
    return float(np.clip(g @ h / (ng * nh), -1.0, 1.0))


# -- estimator variance in the smooth regime ---------------------------------


@dataclass
class VarianceReport:
    d: int
    n: int
    q: int
    mu: float
    trials: int
    S: float
    V: float
    empirical: float
    term_s: float
    term_v: float
    exact: float

    @property
    def theoretical(self) -> float:
        """``(d-1)/(NQ) S + d/(NQ) V``."""
        return self.term_s + self.term_v

    @property
    def rel_dev(self) -> float:
        return abs(self.empirical - self.theoretical) / self.theoretical

    @property
    def rel_dev_exact(self) -> float:
        return abs(self.empirical - self.exact) / self.exact

    CSV_HEADER = "d,N,Q,mu,trials,S,V,empirical,term_s,term_v,theoretical,rel_dev,exact,rel_dev_exact"

    def csv_row(self) -> str:
        vals = (self.d, self.n, self.q, self.mu, self.trials, self.S, self.V, self.empirical,
                self.term_s, self.term_v, self.theoretical, self.rel_dev, self.exact, self.rel_dev_exact)
        return ",".join(f"{v:.9g}" if isinstance(v, float) else str(v) for v in vals)


def variance_report(d: int, n: int, q: int, mu: float = 1e-4, trials: int = 10_000,
                    S: float = 1.0, V: float = 1.0, seed: int = 0, chunk: int = 500) -> VarianceReport:
    """Monte-Carlo MSE of the randomized estimator on a noisy quadratic.

    Per-sample loss ``0.5 * ||theta - x||^2`` with ``x ~ N(c, (V/d) I)``, so
    the population gradient is ``theta - c`` (squared norm ``S``) and the
    per-sample gradient covariance has trace ``V``. Each trial draws N fresh
    samples and N*Q Rademacher directions.

    ``exact`` is the closed-form MSE of this estimator family,
    ``(d-1)/(NQ) S + (d+Q-1)/(NQ) V``: the Q queries that share one sample
    do not average out that sample's noise.
    """
    rng = np.random.default_rng(seed)
    theta = np.zeros(d)
    direction = rng.normal(size=d)
    c = -np.sqrt(S) * direction / np.linalg.norm(direction)
    true_grad = theta - c
    sigma = np.sqrt(V / d)
    total = 0.0
    done = 0
    while done < trials:
        t = min(chunk, trials - done)
        x = c + sigma * rng.normal(size=(t, n, d))
        xi = rng.integers(0, 2, size=(t, n, q, d), dtype=np.int8) * 2 - 1
        r = theta - x
        clean = 0.5 * np.sum(r * r, axis=-1)
        rp = r[:, :, None, :] + mu * xi
        pert = 0.5 * np.sum(rp * rp, axis=-1)
        g = rge_combine(clean, pert, xi, mu)
        total += float(np.sum((g - true_grad) ** 2))
        done += t
    nq = n * q
    return VarianceReport(
        d, n, q, mu, trials, S, V, total / trials,
        (d - 1) / nq * S, d / nq * V, (d - 1) / nq * S + (d + q - 1) / nq * V,
    )


def layerwise_variance(d: int, L: int, n: int, q: int, trials: int = 2000, mu: float = 1e-4,
                       seed: int = 0, act=None) -> tuple[float, float]:
    """Per-layer MSE of model-wise vs layer-wise estimation at a matched budget.

    L identical layers with d perturbed coordinates each (weights for WP,
    output nodes for NP) under a deterministic quadratic whose gradient
    has the same norm in every layer. Model-wise spends ``q`` queries on
    all ``L*d`` coordinates at once; layer-wise gives each layer
    ``q // L``. With ``act`` (an input activation vector) the node
    gradients are converted to weight gradients ``g a^T`` before
    measuring, as node perturbation does. Returns (model_mse, layer_mse),
    averaged over layers.
    """
    if q < L:
        raise ValueError("need at least one query per layer")
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(L, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    a = None if act is None else np.asarray(act, dtype=np.float64)

    def lift(v):
        return v if a is None else v[..., :, None] * a

    def err(est, ref):
        return float(np.sum((lift(est) - lift(ref)) ** 2))

    # loss 0.5 ||u||^2 - <g, u> around u = 0: clean 0, exact gradient -g
    flat = g.ravel()
    model_tot, layer_tot = 0.0, 0.0
    ql = q // L
    for _ in range(trials):
        xi = rng.integers(0, 2, size=(n, q, L * d), dtype=np.int8) * 2 - 1
        u = mu * xi
        pert = 0.5 * np.sum(u * u, axis=-1) - u @ flat
        est = rge_combine(np.zeros(n), pert, xi, mu).reshape(L, d)
        model_tot += err(est, -g)
        for i in range(L):
            xi_l = rng.integers(0, 2, size=(n, ql, d), dtype=np.int8) * 2 - 1
            u = mu * xi_l
            pert = 0.5 * np.sum(u * u, axis=-1) - u @ g[i]
            layer_tot += err(rge_combine(np.zeros(n), pert, xi_l, mu), -g[i])
    return model_tot / (trials * L), layer_tot / (trials * L)


# -- gradient quality harness ------------------------------------------------


@dataclass
class LayerQuality:
    layer: int
    d_w: int
    d_a: int
    chosen: str
    model_wp: float
    model_np: float
    layer_wp: float
    layer_np: float

    @property
    def adaptive(self) -> float:
        return self.layer_wp if self.chosen == "WP" else self.layer_np

    CSV_HEADER = "layer,d_w,d_a,chosen,cos_model_wp,cos_model_np,cos_layer_wp,cos_layer_np,cos_adaptive"

    def csv_row(self) -> str:
        return (f"{self.layer},{self.d_w},{self.d_a},{self.chosen},{self.model_wp:.6f},{self.model_np:.6f},"
                f"{self.layer_wp:.6f},{self.layer_np:.6f},{self.adaptive:.6f}")


def grad_check(model: QModel, batch: Batch, queries: int, seed: int = 1, mu: int = 1,
               share_wp: bool = False) -> list[LayerQuality]:
    """Per-layer cosine similarity of each ZO scheme against backprop.

    Model-wise schemes spend ``queries`` forwards on all layers at once;
    layer-wise schemes give each of the L trainable layers ``queries // L``.
    Weight tensors are compared (the bias lives at a much finer scale and
    would swamp the comparison). WP draws independent directions per sample
    unless ``share_wp``; both variants cost the same number of forwards.
    """
    fp = to_float(model)
    bp = bp_grad_fp(fp, dequantize(batch.inputs), batch.labels)
    layers = model.trainable_layers()
    q_layer = max(1, queries // len(layers))
    mwp = estimate_grad_wp(model, batch, "all", queries, seed, mu, share_wp)
    mnp = estimate_grad_np_modelwise(model, batch, queries, seed, mu)
    out = []
    for i in layers:
        layer = model.layers[i]
        ref = bp[i][0]
        lwp = estimate_grad_wp(model, batch, i, q_layer, seed, mu, share_wp)
        lnp = estimate_grad_np(model, i, batch, q_layer, seed, mu)
        out.append(LayerQuality(
            i, layer.d_w, layer.d_a, choose_mode(layer),
            cosine_similarity(mwp.weight[i], ref), cosine_similarity(mnp.weight[i], ref),
            cosine_similarity(lwp.weight[i], ref), cosine_similarity(lnp.weight[i], ref),
        ))
    return out
