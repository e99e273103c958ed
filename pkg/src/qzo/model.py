"""Quantized model container, forward pass with per-sample loss, and PTQ."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from qzo.quant import (
    QTensor,
    activate,
    conv_out_hw,
    linear_accumulate,
    preactivation,
    quantize,
)

LINEAR_KINDS = ("fc", "conv2d", "dwconv2d")
KINDS = LINEAR_KINDS + ("gap",)
ACTIVATIONS = ("relu", "identity")
SCALE_FLOOR = 2.0**-20


class ModelError(ValueError):
    pass


def f32(x: float) -> float:
    """Round a scale to the nearest float32 so checkpoints stay lossless."""
    return float(np.float32(x))


@dataclass
class LayerSpec:
    """One real-quantized layer.

    Weights are signed 8-bit at scale ``s_w``; the bias is signed 32-bit at
    scale ``s_w * s_x``. Shapes are per sample (no batch axis).
    """

    kind: str
    in_shape: tuple[int, ...]
    s_x: float
    s_z: float
    s_w: float = 1.0
    weight: QTensor | None = None
    bias: QTensor | None = None
    activation: str = "identity"
    stride: int = 1
    padding: int = 0
    out_shape: tuple[int, ...] = field(init=False)
    # (seed, mu) of a perturbation currently added in place, if any
    pending: tuple[int, int] | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")
        for name in ("s_x", "s_z", "s_w"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ModelError(f"{name} must be positive, got {v!r}")
        self.in_shape = tuple(int(d) for d in self.in_shape)
        if self.kind == "gap":
            if len(self.in_shape) != 3:
                raise ModelError("gap expects a (C, H, W) input")
            self.out_shape = (self.in_shape[0],)
            return
        if self.weight is None or self.bias is None:
            raise ModelError(f"{self.kind} layer needs weight and bias")
        if self.weight.bitwidth != 8 or self.bias.bitwidth != 32:
            raise ModelError("weights must be 8-bit and biases 32-bit")
        w = self.weight.shape
        if self.kind == "fc":
            if len(w) != 2 or w[1] != int(np.prod(self.in_shape)):
                raise ModelError(f"fc weight {w} incompatible with input {self.in_shape}")
            self.out_shape = (w[0],)
        else:
            if len(self.in_shape) != 3 or len(w) != 4:
                raise ModelError(f"{self.kind} needs (C, H, W) input and 4-d weight")
            c, h, wd = self.in_shape
            if self.kind == "conv2d" and w[1] != c:
                raise ModelError(f"conv2d weight {w} expects {w[1]} input channels, got {c}")
            if self.kind == "dwconv2d" and (w[0] != c or w[1] != 1):
                raise ModelError(f"dwconv2d weight {w} incompatible with {c} channels")
            ho, wo = conv_out_hw(h, wd, w[2], w[3], self.stride, self.padding)
            if ho < 1 or wo < 1:
                raise ModelError("convolution output is empty")
            self.out_shape = (w[0], ho, wo)
        if self.bias.shape != (self.out_shape[0],):
            raise ModelError(f"bias shape {self.bias.shape} != ({self.out_shape[0]},)")

    @property
    def has_params(self) -> bool:
        return self.kind in LINEAR_KINDS

    @property
    def d_w(self) -> int:
        if not self.has_params:
            return 0
        return self.weight.size + self.bias.size

    @property
    def d_a(self) -> int:
        return int(np.prod(self.out_shape))

    @property
    def s_b(self) -> float:
        return self.s_w * self.s_x

    def params(self) -> tuple[np.ndarray, np.ndarray]:
        return self.weight.data, self.bias.data


@dataclass
class QModel:
    layers: list[LayerSpec]
    n_classes: int
    block_of: list[int | None] = field(default_factory=list)
    trainable_block: int | None = None

    def __post_init__(self):
        if not self.layers:
            raise ModelError("model has no layers")
        if not self.block_of:
            self.block_of = [0 if l.has_params else None for l in self.layers]
        self.validate()

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.layers[0].in_shape

    @property
    def input_scale(self) -> float:
        return self.layers[0].s_x

    @property
    def n_blocks(self) -> int:
        ids = [b for b in self.block_of if b is not None]
        return max(ids) + 1 if ids else 0

    def validate(self):
        for i in range(1, len(self.layers)):
            prev, cur = self.layers[i - 1], self.layers[i]
            if int(np.prod(prev.out_shape)) != int(np.prod(cur.in_shape)):
                raise ModelError(f"layer {i} input {cur.in_shape} != layer {i-1} output {prev.out_shape}")
            if cur.kind != "fc" and tuple(prev.out_shape) != tuple(cur.in_shape):
                raise ModelError(f"layer {i} input {cur.in_shape} != layer {i-1} output {prev.out_shape}")
            if cur.s_x != prev.s_z:
                raise ModelError(f"scale chain broken at layer {i}: s_x {cur.s_x} != s_z {prev.s_z}")
        if self.layers[-1].out_shape != (self.n_classes,):
            raise ModelError(f"final output {self.layers[-1].out_shape} != ({self.n_classes},)")
        if len(self.block_of) != len(self.layers):
            raise ModelError("block_of must have one entry per layer")
        seen = []
        for layer, b in zip(self.layers, self.block_of):
            if layer.has_params and b is None:
                raise ModelError("every trainable layer needs a block")
            if b is not None:
                if not layer.has_params:
                    raise ModelError("parameter-free layers cannot belong to a block")
                if seen and b != seen[-1] and b in seen:
                    raise ModelError("blocks must be contiguous")
                seen.append(b)
        if seen and sorted(set(seen)) != list(range(max(seen) + 1)):
            raise ModelError(f"block ids {sorted(set(seen))} are not 0..k-1")

    def trainable_layers(self) -> list[int]:
        return [
            i for i, (l, b) in enumerate(zip(self.layers, self.block_of))
            if l.has_params and (self.trainable_block is None or b == self.trainable_block)
        ]

    def clone(self) -> "QModel":
        return copy.deepcopy(self)

    def __eq__(self, other):
        if not isinstance(other, QModel):
            return NotImplemented
        if (self.n_classes, self.block_of) != (other.n_classes, other.block_of):
            return False
        if len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            if (a.kind, a.in_shape, a.out_shape, a.activation, a.stride, a.padding) != (
                b.kind, b.in_shape, b.out_shape, b.activation, b.stride, b.padding
            ):
                return False
            if (a.s_w, a.s_x, a.s_z) != (b.s_w, b.s_x, b.s_z):
                return False
            if a.weight != b.weight or a.bias != b.bias:
                return False
        return True

    __hash__ = None


@dataclass
class Batch:
    inputs: QTensor
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.inputs.shape[0] < 1:
            raise ModelError("batch is empty")
        if self.inputs.shape[0] != self.labels.size:
            raise ModelError(f"{self.inputs.shape[0]} inputs but {self.labels.size} labels")

    def __len__(self):
        return self.labels.size

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(QTensor(self.inputs.data[idx], self.inputs.scale), self.labels[idx])


def make_batch(model: QModel, x, labels) -> Batch:
    """Quantize float inputs at the model's input scale."""
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape((x.shape[0],) + tuple(model.input_shape))
    return Batch(quantize(x, model.input_scale), labels)


# -- forward -----------------------------------------------------------------


def layer_forward(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    """Integer batched forward of one layer (no validation)."""
    return activate(layer.activation, preactivation(layer, x))


def run_layers(model: QModel, x: np.ndarray, start: int = 0, stop: int | None = None) -> np.ndarray:
    stop = len(model.layers) if stop is None else stop
    for layer in model.layers[start:stop]:
        x = layer_forward(layer, x)
    return x


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample softmax cross-entropy."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    return logz - shifted[np.arange(labels.size), labels]


def losses_from_output(model: QModel, z: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logits = model.layers[-1].s_z * z.astype(np.float64)
    return logits, cross_entropy(logits, labels)


def _check_batch(model: QModel, batch: Batch):
    if tuple(batch.inputs.shape[1:]) != tuple(model.input_shape):
        raise ModelError(f"batch sample shape {batch.inputs.shape[1:]} != model input {model.input_shape}")
    if batch.inputs.scale != model.input_scale:
        raise ModelError(f"batch scale {batch.inputs.scale} != model input scale {model.input_scale}")
    if batch.labels.min() < 0 or batch.labels.max() >= model.n_classes:
        raise ModelError(f"labels must lie in [0, {model.n_classes})")


def forward(model: QModel, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(logits, per-sample losses)``; logits are dequantized."""
    _check_batch(model, batch)
    z = run_layers(model, batch.inputs.data)
    return losses_from_output(model, z, batch.labels)


def accuracy(model: QModel, batch: Batch) -> float:
    logits, _ = forward(model, batch)
    return float(np.mean(logits.argmax(axis=1) == batch.labels))


# -- floating-point description and post-training quantization --------------


@dataclass
class FPLayer:
    kind: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    activation: str = "identity"
    stride: int = 1
    padding: int = 0


@dataclass
class FPModel:
    layers: list[FPLayer]
    input_shape: tuple[int, ...]
    n_classes: int
    block_of: list[int | None] | None = None


def fp_layer_preact(layer: FPLayer, a: np.ndarray) -> np.ndarray:
    if layer.kind == "gap":
        return a.mean(axis=(2, 3))
    return linear_accumulate(layer.kind, a, layer.weight, layer.bias, layer.stride, layer.padding)


def fp_forward(fp: FPModel, x: np.ndarray) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).reshape((len(x),) + tuple(fp.input_shape))
    for layer in fp.layers:
        a = activate(layer.activation, fp_layer_preact(layer, a))
    return a


def _absmax_scale(x) -> float:
    m = float(np.max(np.abs(x))) if np.size(x) else 0.0
    return f32(m / 127) if m > 0 else SCALE_FLOOR


def ptq_calibrate(fp: FPModel, calib) -> QModel:
    """Per-tensor symmetric INT8 quantization calibrated on ``calib``.

    Weight scales are ``max|W| / 127``, activation scales ``max|z| / 127``
    over the calibration set; all-zero tensors get the ``2**-20`` floor.
    """
    calib = np.asarray(calib, dtype=np.float64)
    if calib.size == 0 or len(calib) == 0:
        raise ModelError("calibration set is empty")
    a = calib.reshape((len(calib),) + tuple(fp.input_shape))
    s_x = _absmax_scale(a)
    in_shape = tuple(fp.input_shape)
    layers = []
    for spec in fp.layers:
        z = fp_layer_preact(spec, a)
        s_z = _absmax_scale(z)
        if spec.kind == "gap":
            layer = LayerSpec("gap", in_shape, s_x=s_x, s_z=s_z, activation=spec.activation)
        else:
            s_w = _absmax_scale(spec.weight)
            wq = quantize(spec.weight, s_w, 8)
            bq = quantize(np.zeros(len(spec.weight)) if spec.bias is None else spec.bias, s_w * s_x, 32)
            layer = LayerSpec(
                spec.kind, in_shape, s_x=s_x, s_z=s_z, s_w=s_w, weight=wq, bias=bq,
                activation=spec.activation, stride=spec.stride, padding=spec.padding,
            )
        layers.append(layer)
        a = activate(spec.activation, z)
        s_x, in_shape = s_z, layer.out_shape
    block_of = fp.block_of if fp.block_of is not None else None
    return QModel(layers, fp.n_classes, block_of=list(block_of) if block_of else [])


def to_float(model: QModel) -> FPModel:
    """Dequantized floating-point mirror with identical topology."""
    layers = []
    for l in model.layers:
        if l.has_params:
            layers.append(FPLayer(
                l.kind, l.s_w * l.weight.data.astype(np.float64),
                l.s_b * l.bias.data.astype(np.float64), l.activation, l.stride, l.padding,
            ))
        else:
            layers.append(FPLayer(l.kind, activation=l.activation))
    return FPModel(layers, model.input_shape, model.n_classes, list(model.block_of))


# -- block partition ---------------------------------------------------------


def balanced_split(sizes: list[int], k: int) -> list[int]:
    """Contiguous assignment of ``sizes`` to ``k`` groups of similar total.

    Walks the items in order and closes the current group as soon as adding
    the next item would move its total further from the ideal share
    ``remaining / groups_left`` (ties close the group).
    """
    if k < 1 or len(sizes) < k:
        raise ModelError(f"cannot split {len(sizes)} trainable layers into {k} blocks")
    assign = []
    block, acc = 0, 0
    remaining = sum(sizes)
    for j, size in enumerate(sizes):
        blocks_left = k - block
        if acc > 0 and block < k - 1:
            target = remaining / blocks_left
            # each later block needs at least one layer
            starved = len(sizes) - j < blocks_left
            if starved or abs(acc + size - target) >= abs(acc - target):
                block += 1
                remaining -= acc
                acc = 0
        assign.append(block)
        acc += size
    return assign


def partition_blocks(model: QModel, k: int = 4) -> list[int | None]:
    """Partition trainable layers into ``k`` contiguous blocks balanced by
    parameter count; assigns ``model.block_of`` and returns it."""
    idx = [i for i, l in enumerate(model.layers) if l.has_params]
    assign = balanced_split([model.layers[i].d_w for i in idx], k)
    block_of: list[int | None] = [None] * len(model.layers)
    for i, b in zip(idx, assign):
        block_of[i] = b
    model.block_of = block_of
    model.trainable_block = None
    model.validate()
    return block_of
