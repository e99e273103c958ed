"""Analytic memory and compute accounting for each training method.

Memory is counted in tensor elements, then in bytes with 8-bit
activations, weights and perturbations (1 B) and 32-bit per-query loss
scalars (4 B). Backward passes are costed at twice the forward MACs.
"""
from __future__ import annotations

from dataclasses import dataclass

from qzo.model import QModel
from qzo.zo import PerturbConfig, layer_queries

METHODS = ("inference", "WP-vanilla", "WP-efficient", "NP-vanilla", "NP-efficient", "BP")
ZO_METHODS = METHODS[1:5]


def _method(name: str) -> str:
    for m in METHODS:
        if m.lower() == str(name).lower():
            return m
    raise ValueError(f"unknown method {name!r}; expected one of {METHODS}")


def _check_dims(**dims):
    for k, v in dims.items():
        if int(v) != v or v < 1:
            raise ValueError(f"{k} must be an integer >= 1, got {v}")


def memory_terms(L: int, d_a: int, d_w: int, N: int, Q: int, method: str) -> tuple[int, int]:
    """(one-byte elements, four-byte elements) for ``method``."""
    _check_dims(L=L, d_a=d_a, d_w=d_w, N=N, Q=Q)
    m = _method(method)
    if m == "inference":
        return N * (2 * d_a + d_w), 0
    if m == "WP-vanilla":
        return L * d_w, 0
    if m == "WP-efficient":
        return 0, L * Q
    if m == "NP-vanilla":
        return N * L * d_a + L * d_w, 0
    if m == "NP-efficient":
        return d_w, N * L * Q
    return N * L * d_a + L * d_w, 0


def analytic_memory(L: int, d_a: int, d_w: int, N: int, Q: int, method: str) -> int:
    """Peak training memory in elements for L identical layers."""
    small, wide = memory_terms(L, d_a, d_w, N, Q, method)
    return small + wide


def memory_bytes(L: int, d_a: int, d_w: int, N: int, Q: int, method: str) -> int:
    small, wide = memory_terms(L, d_a, d_w, N, Q, method)
    return small + 4 * wide


def layer_macs(layer) -> int:
    if not layer.has_params:
        return 0
    w = layer.weight.shape
    if layer.kind == "fc":
        return w[0] * w[1]
    _, ho, wo = layer.out_shape
    if layer.kind == "conv2d":
        return w[0] * ho * wo * w[1] * w[2] * w[3]
    return w[0] * ho * wo * w[2] * w[3]


def forward_macs(model: QModel) -> int:
    """Multiply-accumulates of one single-sample forward pass."""
    return sum(layer_macs(l) for l in model.layers)


def forward_count(method: str, N: int, Q: int) -> int:
    """Sample-level forward evaluations per iteration (clean + queries)."""
    _check_dims(N=N, Q=Q)
    m = _method(method)
    if m in ("inference", "BP"):
        return N
    return N + N * Q


def mac_count(model: QModel, method: str, N: int, Q: int) -> int:
    f = forward_macs(model)
    m = _method(method)
    if m == "BP":
        return N * (f + 2 * f)
    return forward_count(m, N, Q) * f


def engine_forwards(model: QModel, pconf: PerturbConfig, n: int) -> int:
    """Forward evaluations ``train_step`` reports for a batch of ``n`` samples.

    Partial forwards through a suffix of the network count as one each.
    """
    layers = model.trainable_layers()
    q = layer_queries(pconf, len(layers))
    if pconf.mode == "model-wp":
        return n + n * q
    return n + n * q * len(layers)


def model_dims(model: QModel) -> dict[str, int]:
    """Table-style dims for a real model: layer count and the largest layer."""
    layers = [model.layers[i] for i in model.trainable_layers()]
    if not layers:
        raise ValueError("model has no trainable layers")
    return {"L": len(layers), "d_a": max(l.d_a for l in layers), "d_w": max(l.d_w for l in layers)}


@dataclass
class ProfileReport:
    method: str
    elements: int
    bytes: int
    forwards: int
    macs: int

    CSV_HEADER = "method,memory_elements,memory_bytes,forwards,macs"

    def csv_row(self) -> str:
        return f"{self.method},{self.elements},{self.bytes},{self.forwards},{self.macs}"


def profile(L: int, d_a: int, d_w: int, N: int, Q: int, macs_per_forward: int) -> list[ProfileReport]:
    out = []
    for m in METHODS:
        fwd = forward_count(m, N, Q)
        macs = N * 3 * macs_per_forward if m == "BP" else fwd * macs_per_forward
        out.append(ProfileReport(m, analytic_memory(L, d_a, d_w, N, Q, m),
                                 memory_bytes(L, d_a, d_w, N, Q, m), fwd, macs))
    return out


def profile_model(model: QModel, N: int, Q: int) -> list[ProfileReport]:
    return profile(N=N, Q=Q, macs_per_forward=forward_macs(model), **model_dims(model))


def render_table(reports: list[ProfileReport]) -> str:
    head = ("method", "elements", "bytes", "forwards", "MACs")
    rows = [head] + [(r.method, str(r.elements), str(r.bytes), str(r.forwards), str(r.macs)) for r in reports]
    widths = [max(len(r[k]) for r in rows) for k in range(len(head))]
    lines = ["  ".join(c.ljust(w) if k == 0 else c.rjust(w) for k, (c, w) in enumerate(zip(r, widths)))
             for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
