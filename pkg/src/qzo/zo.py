"""Quantized zeroth-order gradient estimation and the training step.

Gradients are estimated from forward evaluations only. Weight perturbation
(WP) adds ``mu * xi`` to integer parameters; node perturbation (NP) adds it
to a layer's integer pre-activation and maps the node gradient back onto
the parameters. ``xi`` is Rademacher noise regenerated from a seed, never
stored.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from qzo import prng
from qzo.model import (
    Batch,
    LayerSpec,
    QModel,
    _check_batch,
    layer_forward,
    losses_from_output,
    run_layers,
)
from qzo.optimizer import apply_update
from qzo.quant import QTensor, activate, preactivation, windows

MODES = ("model-wp", "layer-wp", "layer-np", "adaptive")


class ZOError(ValueError):
    pass


@dataclass
class PerturbConfig:
    mode: str = "adaptive"
    queries: int = 10
    mu: int = 1
    base_seed: int = 1
    share_wp_across_batch: bool = True
    per_sample_np: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ZOError(f"unknown perturbation mode {self.mode!r}; expected one of {MODES}")
        if self.queries < 1:
            raise ZOError(f"queries must be >= 1, got {self.queries}")
        if int(self.mu) != self.mu or self.mu < 1:
            raise ZOError(f"mu must be a positive integer, got {self.mu}")
        if not 0 < self.base_seed <= prng.MASK32:
            raise ZOError(f"base_seed must be a nonzero 32-bit integer, got {self.base_seed}")


@dataclass
class GradEstimate:
    """Per-layer gradient buffers w.r.t. the integer parameters."""

    weight: dict[int, np.ndarray]
    bias: dict[int, np.ndarray]
    d: int
    scope: str
    seed: int
    forwards: int
    queries: int
    n: int

    def flat(self, i: int) -> np.ndarray:
        return np.concatenate([self.weight[i].ravel(), self.bias[i].ravel()])


@dataclass
class StepReport:
    iteration: int
    loss: float
    modes: dict[int, str] = field(default_factory=dict)
    seeds: dict[int, int] = field(default_factory=dict)
    forwards: int = 0
    grad_norms: dict[int, float] = field(default_factory=dict)
    wall_ms: float = 0.0

    CSV_HEADER = "iteration,loss,modes,forwards,wall_ms"

    def mode_string(self) -> str:
        return ";".join(f"{i}:{m}" for i, m in sorted(self.modes.items()))

    def csv_row(self) -> str:
        return f"{self.iteration},{self.loss:.9g},{self.mode_string()},{self.forwards},{self.wall_ms:.3f}"


def choose_mode(layer: LayerSpec) -> str:
    """WP when the layer has fewer parameters than output nodes, else NP."""
    return "WP" if layer.d_w < layer.d_a else "NP"


# -- in-place weight perturbation --------------------------------------------


def _split_xi(layer: LayerSpec, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nw = layer.weight.size
    return xi[:nw].reshape(layer.weight.shape), xi[nw:]


def perturb_weights_inplace(layer: LayerSpec, seed: int, mu: int, direction: str) -> np.ndarray:
    """Add (``apply``) or subtract (``remove``) ``mu * xi`` in place.

    No clipping: a parameter at 127 may transiently hold 128, which keeps the
    operation exactly invertible. Returns the regenerated ``xi``.
    """
    if not layer.has_params:
        raise ZOError(f"{layer.kind} layer has no parameters to perturb")
    if seed == 0:
        raise ZOError("perturbation seed must be nonzero")
    if direction == "apply":
        if layer.pending is not None:
            raise ZOError("layer is already perturbed")
        sign = 1
    elif direction == "remove":
        if layer.pending != (seed, mu):
            raise ZOError("remove without a matching apply (seed and mu must match)")
        sign = -1
    else:
        raise ZOError(f"direction must be 'apply' or 'remove', got {direction!r}")
    xi = prng.rademacher_fill(seed, layer.d_w)
    xw, xb = _split_xi(layer, xi)
    w, b = layer.weight.data, layer.bias.data
    np.add(w, sign * mu * xw.astype(np.int32), out=w)
    np.add(b, sign * mu * xb.astype(np.int32), out=b)
    layer.pending = (seed, mu) if sign == 1 else None
    return xi


# -- estimator cores ---------------------------------------------------------
#
# Cores work on cached integer activations and precomputed clean losses so the
# training step can share one clean forward across all layers. Every core
# divides by the caller-supplied ``norm`` (= N_total * Q * mu) and accumulates
# queries in increasing q, samples in increasing n.


def _wp_core(model, scope, x_in, start, labels, clean, queries, seed, mu, shared, norm, sample_offset):
    grads = {i: np.zeros(model.layers[i].d_w) for i in scope}
    n = labels.size
    forwards = 0
    for q in range(queries):
        if shared:
            seeds = {i: prng.derive_seed(seed, i, q, sample_offset) for i in scope}
            xis = {}
            try:
                for i in scope:
                    xis[i] = perturb_weights_inplace(model.layers[i], seeds[i], mu, "apply")
                _, lq = losses_from_output(model, run_layers(model, x_in, start), labels)
            finally:
                for i in xis:
                    perturb_weights_inplace(model.layers[i], seeds[i], mu, "remove")
            forwards += n
            coef = float(np.sum(lq - clean)) / norm
            for i in scope:
                grads[i] += coef * xis[i]
        else:
            for s in range(n):
                seeds = {i: prng.derive_seed(seed, i, q, sample_offset + s) for i in scope}
                xis = {}
                try:
                    for i in scope:
                        xis[i] = perturb_weights_inplace(model.layers[i], seeds[i], mu, "apply")
                    _, lq = losses_from_output(
                        model, run_layers(model, x_in[s:s + 1], start), labels[s:s + 1]
                    )
                finally:
                    for i in xis:
                        perturb_weights_inplace(model.layers[i], seeds[i], mu, "remove")
                forwards += 1
                coef = float(lq[0] - clean[s]) / norm
                for i in scope:
                    grads[i] += coef * xis[i]
    return grads, forwards


def node_grad_to_params(layer: LayerSpec, grad_z: np.ndarray, a_in: np.ndarray):
    """Map node gradients onto parameters: ``dW = k * dz a^T``, ``db = k * dz``.

    ``grad_z`` has the batched output shape; contributions are summed over
    samples (and spatial positions for convolutions). ``k = s_W s_x / s_z``
    links the integer pre-activation to the integer weights.
    """
    kappa = layer.s_w * layer.s_x / layer.s_z
    a = np.asarray(a_in, dtype=np.float64)
    gz = np.asarray(grad_z, dtype=np.float64)
    n = gz.shape[0]
    if layer.kind == "fc":
        gw = gz.reshape(n, -1).T @ a.reshape(n, -1)
        gb = gz.reshape(n, -1).sum(axis=0)
    elif layer.kind == "conv2d":
        kh, kw = layer.weight.shape[2:]
        cols = windows(a, kh, kw, layer.stride, layer.padding)
        gw = np.tensordot(gz, cols, axes=([0, 2, 3], [0, 2, 3]))
        gb = gz.sum(axis=(0, 2, 3))
    elif layer.kind == "dwconv2d":
        kh, kw = layer.weight.shape[2:]
        cols = windows(a, kh, kw, layer.stride, layer.padding)
        gw = np.einsum("nchw,nchwij->cij", gz, cols)[:, None]
        gb = gz.sum(axis=(0, 2, 3))
    else:
        raise ZOError(f"{layer.kind} layer has no pre-activation to perturb")
    return kappa * gw, kappa * gb


def _np_core(model, i, a_in, labels, clean, queries, seed, mu, per_sample, norm, sample_offset):
    layer = model.layers[i]
    if not layer.has_params:
        raise ZOError(f"layer {i} ({layer.kind}) has no pre-activation")
    z = preactivation(layer, a_in)
    n = labels.size
    d_a = layer.d_a
    gz = np.zeros((n, d_a))
    for q in range(queries):
        if per_sample:
            seeds = [prng.derive_seed(seed, i, q, sample_offset + s) for s in range(n)]
            xi = prng.rademacher_fill_many(seeds, d_a)
        else:
            xi = np.broadcast_to(prng.rademacher_fill(prng.derive_seed(seed, i, q, sample_offset), d_a), (n, d_a))
        a_pert = activate(layer.activation, z + mu * xi.reshape(z.shape).astype(np.int64))
        _, lq = losses_from_output(model, run_layers(model, a_pert, i + 1), labels)
        gz += ((lq - clean) / norm)[:, None] * xi
    gw, gb = node_grad_to_params(layer, gz.reshape(z.shape), a_in)
    return gw, gb, n * queries


# -- public estimators -------------------------------------------------------


def _scope_layers(model: QModel, scope) -> list[int]:
    if scope in ("all", None):
        layers = model.trainable_layers()
    else:
        layers = [int(scope)]
    for i in layers:
        if not 0 <= i < len(model.layers) or not model.layers[i].has_params:
            raise ZOError(f"layer {i} has no trainable parameters")
    if not layers:
        raise ZOError("no trainable layers in scope")
    return layers


def estimate_grad_wp(model: QModel, batch: Batch, scope="all", queries: int = 1, seed: int = 1,
                     mu: int = 1, shared: bool = True) -> GradEstimate:
    """Weight-perturbation estimate over all trainable layers or one layer.

    ``g = 1/(N Q) sum_q sum_n (l(theta + mu xi) - l(theta)) / mu * xi``.
    The model is bit-identical before and after the call.
    """
    if seed == 0:
        raise ZOError("seed must be nonzero")
    if queries < 1:
        raise ZOError("queries must be >= 1")
    _check_batch(model, batch)
    layers = _scope_layers(model, scope)
    start = min(layers)
    x_in = run_layers(model, batch.inputs.data, 0, start)
    _, clean = losses_from_output(model, run_layers(model, x_in, start), batch.labels)
    n = len(batch)
    flat, forwards = _wp_core(
        model, layers, x_in, start, batch.labels, clean, queries, seed, mu, shared, n * queries * mu, 0
    )
    weight, bias = {}, {}
    for i in layers:
        weight[i], bias[i] = _split_xi(model.layers[i], flat[i])
    d = sum(model.layers[i].d_w for i in layers)
    return GradEstimate(weight, bias, d, "all" if len(layers) > 1 or scope == "all" else f"layer {layers[0]}",
                        seed, n + forwards, queries, n)


def estimate_grad_np(model: QModel, layer_index: int, batch: Batch, queries: int = 1, seed: int = 1,
                     mu: int = 1, per_sample: bool = True) -> GradEstimate:
    """Node-perturbation estimate for one layer's weights and bias."""
    if seed == 0:
        raise ZOError("seed must be nonzero")
    if queries < 1:
        raise ZOError("queries must be >= 1")
    _check_batch(model, batch)
    i = _scope_layers(model, layer_index)[0]
    a_in = run_layers(model, batch.inputs.data, 0, i)
    _, clean = losses_from_output(model, run_layers(model, a_in, i), batch.labels)
    n = len(batch)
    gw, gb, forwards = _np_core(model, i, a_in, batch.labels, clean, queries, seed, mu, per_sample,
                                n * queries * mu, 0)
    return GradEstimate({i: gw}, {i: gb}, model.layers[i].d_a, f"layer {i}", seed, n + forwards, queries, n)


def estimate_grad_np_modelwise(model: QModel, batch: Batch, queries: int = 1, seed: int = 1,
                               mu: int = 1) -> GradEstimate:
    """Vanilla node perturbation: every trainable layer's pre-activation is
    perturbed in the same forward pass. Needs all clean layer inputs kept
    alive, so it is only used for gradient-quality comparisons."""
    if seed == 0:
        raise ZOError("seed must be nonzero")
    _check_batch(model, batch)
    layers = _scope_layers(model, "all")
    n = len(batch)
    inputs, a = [], batch.inputs.data
    for layer in model.layers:
        inputs.append(a)
        a = layer_forward(layer, a)
    _, clean = losses_from_output(model, a, batch.labels)
    norm = n * queries * mu
    gz = {i: np.zeros((n, model.layers[i].d_a)) for i in layers}
    for q in range(queries):
        xis = {}
        a = batch.inputs.data
        for k, layer in enumerate(model.layers):
            z = preactivation(layer, a)
            if k in gz:
                seeds = [prng.derive_seed(seed, k, q, s) for s in range(n)]
                xis[k] = prng.rademacher_fill_many(seeds, layer.d_a)
                z = z + mu * xis[k].reshape(z.shape).astype(np.int64)
            a = activate(layer.activation, z)
        _, lq = losses_from_output(model, a, batch.labels)
        for i in layers:
            gz[i] += ((lq - clean) / norm)[:, None] * xis[i]
    weight, bias = {}, {}
    for i in layers:
        layer = model.layers[i]
        weight[i], bias[i] = node_grad_to_params(layer, gz[i].reshape((n,) + layer.out_shape), inputs[i])
    d = sum(model.layers[i].d_a for i in layers)
    return GradEstimate(weight, bias, d, "all", seed, n + n * queries, queries, n)


def rge_combine(clean, perturbed, xi, mu: float) -> np.ndarray:
    """Batched randomized gradient estimate from materialized evaluations.

    ``clean`` has shape (..., N), ``perturbed`` (..., N, Q) and ``xi``
    (..., N, Q, d); returns (..., d). Same formula as the streaming
    estimators, usable in any numeric regime.
    """
    clean = np.asarray(clean, dtype=np.float64)
    diff = (np.asarray(perturbed, dtype=np.float64) - clean[..., None]) / mu
    n, q = diff.shape[-2:]
    return np.einsum("...nq,...nqd->...d", diff, np.asarray(xi, dtype=np.float64)) / (n * q)


# -- training step -----------------------------------------------------------


def layer_queries(pconf: PerturbConfig, n_trainable: int) -> int:
    """Per-layer query budget: the total split evenly, at least one."""
    if pconf.mode == "model-wp":
        return pconf.queries
    return max(1, pconf.queries // max(1, n_trainable))


def layer_mode(pconf: PerturbConfig, layer: LayerSpec) -> str:
    if pconf.mode == "layer-wp":
        return "WP"
    if pconf.mode == "layer-np":
        return "NP"
    return choose_mode(layer)


def _snapshot(model: QModel):
    return [(l.weight.data.copy(), l.bias.data.copy()) if l.has_params else None for l in model.layers]


def _restore(model: QModel, snap):
    for layer, saved in zip(model.layers, snap):
        layer.pending = None
        if saved is not None:
            layer.weight = QTensor(saved[0].copy(), layer.weight.scale, 8)
            layer.bias = QTensor(saved[1].copy(), layer.bias.scale, 32)


def _update_layer(layer: LayerSpec, gw, gb, lr, n, q, d, gns, qas):
    layer.weight = apply_update(layer.weight, gw, lr, n, q, d, layer.s_w, gns, qas)
    layer.bias = apply_update(layer.bias, gb, lr, n, q, d, layer.s_b, gns, qas)


def train_step(model: QModel, batches, pconf: PerturbConfig, lr: float, iteration: int = 0,
               gns: bool = True, qas: bool = True) -> StepReport:
    """One memory-efficient layer-wise ZO-SGD step.

    ``batches`` is a Batch or a list of micro-batches whose gradients are
    accumulated before the update. Layers are visited in order: estimate the
    layer's gradient from the cached step-``t`` input activation, update the
    layer, then recompute its output with the old parameters so every later
    layer still sees step-``t`` activations. The result therefore equals
    estimating every gradient at ``theta_t`` and applying all updates at
    once. On error the model is restored and the exception re-raised.
    """
    batches = [batches] if isinstance(batches, Batch) else list(batches)
    if not batches:
        raise ZOError("no micro-batches given")
    for b in batches:
        _check_batch(model, b)
    t0 = time.perf_counter()
    snap = _snapshot(model)
    try:
        report = _train_step(model, batches, pconf, lr, iteration, gns, qas)
    except BaseException:
        _restore(model, snap)
        raise
    report.wall_ms = (time.perf_counter() - t0) * 1e3
    return report


def _train_step(model, batches, pconf, lr, iteration, gns, qas) -> StepReport:
    seed = prng.step_seed(pconf.base_seed, iteration)
    trainable = model.trainable_layers()
    if not trainable:
        raise ZOError("model has no trainable layers")
    n_total = sum(len(b) for b in batches)
    offsets = np.cumsum([0] + [len(b) for b in batches[:-1]])
    mu = int(pconf.mu)
    q_layer = layer_queries(pconf, len(trainable))
    norm = n_total * q_layer * mu

    acts = [b.inputs.data for b in batches]
    cleans = [losses_from_output(model, run_layers(model, a), b.labels)[1] for a, b in zip(acts, batches)]
    report = StepReport(iteration, float(np.mean(np.concatenate(cleans))))
    report.forwards = n_total

    if pconf.mode == "model-wp":
        start = min(trainable)
        xs = [run_layers(model, a, 0, start) for a in acts]
        total = {i: np.zeros(model.layers[i].d_w) for i in trainable}
        for k, (x, b, clean) in enumerate(zip(xs, batches, cleans)):
            offset = k if pconf.share_wp_across_batch else int(offsets[k])
            g, fw = _wp_core(model, trainable, x, start, b.labels, clean, q_layer, seed, mu,
                             pconf.share_wp_across_batch, norm, offset)
            report.forwards += fw
            for i in trainable:
                total[i] += g[i]
        d = sum(model.layers[i].d_w for i in trainable)
        for i in trainable:
            layer = model.layers[i]
            gw, gb = _split_xi(layer, total[i])
            _update_layer(layer, gw, gb, lr, n_total, q_layer, d, gns, qas)
            report.modes[i] = "WP"
            report.seeds[i] = seed
            report.grad_norms[i] = float(np.linalg.norm(total[i]))
        return report

    for i, layer in enumerate(model.layers):
        if i not in trainable:
            acts = [layer_forward(layer, a) for a in acts]
            continue
        mode = layer_mode(pconf, layer)
        gw = np.zeros(layer.weight.shape)
        gb = np.zeros(layer.bias.shape)
        for k, (a, b, clean) in enumerate(zip(acts, batches, cleans)):
            if mode == "WP":
                offset = k if pconf.share_wp_across_batch else int(offsets[k])
                g, fw = _wp_core(model, [i], a, i, b.labels, clean, q_layer, seed, mu,
                                 pconf.share_wp_across_batch, norm, offset)
                w_part, b_part = _split_xi(layer, g[i])
            else:
                offset = int(offsets[k]) if pconf.per_sample_np else k
                w_part, b_part, fw = _np_core(model, i, a, b.labels, clean, q_layer, seed, mu,
                                              pconf.per_sample_np, norm, offset)
            gw += w_part
            gb += b_part
            report.forwards += fw
        d = layer.d_w if mode == "WP" else layer.d_a
        old = (layer.weight, layer.bias)
        _update_layer(layer, gw, gb, lr, n_total, q_layer, d, gns, qas)
        new = (layer.weight, layer.bias)
        # recover the step-t output with the pre-update parameters
        layer.weight, layer.bias = old
        acts = [layer_forward(layer, a) for a in acts]
        layer.weight, layer.bias = new
        report.modes[i] = mode
        report.seeds[i] = seed
        report.grad_norms[i] = float(np.sqrt(np.sum(gw**2) + np.sum(gb**2)))
    return report
