"""Fixed-point tensors and the real-quantized layer arithmetic.

Every linear layer computes ``z = clip(round(s_W*s_x*(W @ x + b) / s_z))``
where ``W``, ``x`` are 8-bit integers and ``b`` is a 32-bit integer stored at
scale ``s_W*s_x``, so the whole accumulation happens in integers and the only
floating-point operation is the final requantization multiply.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

if TYPE_CHECKING:
    from qzo.model import LayerSpec

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1
SUPPORTED_BITWIDTHS = (8, 32)


class QuantError(ValueError):
    """Invalid quantized tensor or layer arithmetic."""


class AccumulatorOverflow(QuantError):
    """A 32-bit accumulator would have wrapped around."""


def qrange(bitwidth: int, signed: bool = True) -> tuple[int, int]:
    """Return the inclusive integer range ``(-Q_N, Q_P)`` of a format."""
    if bitwidth not in SUPPORTED_BITWIDTHS:
        raise QuantError(f"unsupported bitwidth {bitwidth}; expected one of {SUPPORTED_BITWIDTHS}")
    if signed:
        return -(2 ** (bitwidth - 1)), 2 ** (bitwidth - 1) - 1
    return 0, 2**bitwidth - 1


def round_half_away(x) -> np.ndarray:
    """Round to nearest integer, ties away from zero. Returns int64."""
    x = np.asarray(x, dtype=np.float64)
    whole = np.trunc(x)
    frac = x - whole  # exact in IEEE arithmetic
    out = whole + np.where(np.abs(frac) >= 0.5, np.sign(frac), 0.0)
    return out.astype(np.int64)


@dataclass(frozen=True, eq=False)
class QTensor:
    """Integer tensor with a per-tensor floating-point scale.

    ``data`` holds the integer values (stored as int32, the widest supported
    format), ``scale`` maps them back to reals: ``value = scale * data``.
    """

    data: np.ndarray
    scale: float
    bitwidth: int = 8
    signed: bool = True

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype.kind not in "iu":
            raise QuantError(f"QTensor data must be integer, got {data.dtype}")
        lo, hi = qrange(self.bitwidth, self.signed)
        if data.size and (data.min() < lo or data.max() > hi):
            bad = int(np.flatnonzero((data < lo) | (data > hi))[0])
            raise QuantError(
                f"element {bad} = {data.reshape(-1)[bad]} outside [{lo}, {hi}] "
                f"for {'signed' if self.signed else 'unsigned'} {self.bitwidth}-bit"
            )
        scale = float(self.scale)
        if not np.isfinite(scale) or scale <= 0:
            raise QuantError(f"scale must be positive and finite, got {self.scale!r}")
        object.__setattr__(self, "data", data.astype(np.int32, copy=False))
        object.__setattr__(self, "scale", scale)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def copy(self) -> "QTensor":
        return QTensor(self.data.copy(), self.scale, self.bitwidth, self.signed)

    def __eq__(self, other):
        if not isinstance(other, QTensor):
            return NotImplemented
        return (
            self.scale == other.scale
            and self.bitwidth == other.bitwidth
            and self.signed == other.signed
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )

    __hash__ = None


def quantize(x, scale: float, bitwidth: int = 8, signed: bool = True) -> QTensor:
    """Quantize a float array: ``clip(round(x / scale), -Q_N, Q_P)``."""
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(scale) or scale <= 0:
        raise QuantError(f"scale must be positive and finite, got {scale!r}")
    finite = np.isfinite(x)
    if not finite.all():
        bad = int(np.flatnonzero(~finite.reshape(-1))[0])
        raise QuantError(f"non-finite input at element {bad}")
    lo, hi = qrange(bitwidth, signed)
    q = np.clip(round_half_away(x / scale), lo, hi)
    return QTensor(q.astype(np.int32), scale, bitwidth, signed)


def dequantize(t: QTensor) -> np.ndarray:
    return t.scale * t.data.astype(np.float64)


# -- integer kernels ---------------------------------------------------------
#
# Kernels below operate on raw batched integer arrays (leading batch axis) so
# the training engine can call them without re-validating every tensor. Values
# may transiently sit one step outside the 8-bit range during perturbation;
# the float64 accumulation is still exact because |sum| << 2**53.


def windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Sliding (kh, kw) patches of an NCHW array -> (N, C, Ho, Wo, kh, kw) view."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv_out_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    return (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1


def linear_accumulate(kind: str, x, weight, bias, stride: int = 1, padding: int = 0) -> np.ndarray:
    """``W (*) x + b`` for one of the linear kinds, any numeric dtype.

    Used for the integer path (inputs cast to float64, exact) and by the
    floating-point mirror.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(weight, dtype=np.float64)
    n = x.shape[0]
    if kind == "fc":
        out = x.reshape(n, -1) @ w.T
        if bias is not None:
            out += bias
        return out
    if kind == "conv2d":
        cols = windows(x, w.shape[2], w.shape[3], stride, padding)
        out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if bias is not None:
            out = out + np.asarray(bias, dtype=np.float64)[None, :, None, None]
        return out
    if kind == "dwconv2d":
        cols = windows(x, w.shape[2], w.shape[3], stride, padding)
        out = np.einsum("nchwij,cij->nchw", cols, w[:, 0])
        if bias is not None:
            out = out + np.asarray(bias, dtype=np.float64)[None, :, None, None]
        return out
    raise QuantError(f"{kind!r} is not a linear layer kind")


def _check_int32(acc: np.ndarray) -> np.ndarray:
    if acc.size and (acc.min() < INT32_MIN or acc.max() > INT32_MAX):
        raise AccumulatorOverflow(
            f"accumulator range [{acc.min():.0f}, {acc.max():.0f}] exceeds 32-bit signed"
        )
    return acc.astype(np.int64)


def integer_accumulate(layer: "LayerSpec", x: np.ndarray) -> np.ndarray:
    """32-bit integer accumulator of a layer (int64 array, overflow checked)."""
    if layer.kind == "gap":
        return _check_int32(x.astype(np.int64).sum(axis=(2, 3)))
    acc = linear_accumulate(
        layer.kind, x, layer.weight.data, layer.bias.data, layer.stride, layer.padding
    )
    return _check_int32(acc)


def requant_factor(layer: "LayerSpec") -> float:
    """Multiplier taking the accumulator to output units."""
    if layer.kind == "gap":
        h, w = layer.in_shape[1], layer.in_shape[2]
        return layer.s_x / (h * w * layer.s_z)
    return layer.s_w * layer.s_x / layer.s_z


def requantize(acc: np.ndarray, factor: float, bitwidth: int = 8) -> np.ndarray:
    lo, hi = qrange(bitwidth, True)
    return np.clip(round_half_away(acc * factor), lo, hi)


def preactivation(layer: "LayerSpec", x: np.ndarray) -> np.ndarray:
    """Quantized pre-activation ``z`` (int64) of a batched integer input."""
    return requantize(integer_accumulate(layer, x), requant_factor(layer))


def activate(activation: str, z: np.ndarray) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0)
    if activation == "identity":
        return z
    raise QuantError(f"unknown activation {activation!r}")


def q_layer_forward(layer: "LayerSpec", x: QTensor) -> QTensor:
    """Run one real-quantized layer on a batched input tensor."""
    if tuple(x.shape[1:]) != tuple(layer.in_shape) and not (
        layer.kind == "fc" and int(np.prod(x.shape[1:])) == int(np.prod(layer.in_shape))
    ):
        raise QuantError(f"input shape {x.shape[1:]} does not match layer input {layer.in_shape}")
    if x.scale != layer.s_x:
        raise QuantError(f"input scale {x.scale!r} differs from layer s_x {layer.s_x!r}")
    z = activate(layer.activation, preactivation(layer, x.data))
    return QTensor(z.astype(np.int32), layer.s_z, 8, True)
