"""Binary checkpoint and dataset formats (little-endian).

Checkpoint ``QZOT`` v1::

    magic "QZOT" | u16 version | u32 layer count | u32 class count
    per layer:
        u8 kind | u8 activation | i8 block (-1: none) | u8 stride | u8 padding
        u32 rank + u32 dims   (input shape, per sample)
        u32 rank + u32 dims   (weight shape; rank 0 when parameter-free)
        f32 s_W | f32 s_x | f32 s_z
        i8 weights (raw) | i32 bias (raw, one per output channel)
    u32 CRC32 of every preceding byte

Dataset ``QDS1``::

    magic "QDS1" | u32 count | u32 channels | u32 height | u32 width
    u8 pixels, sample-major | u32 labels
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from qzo.model import KINDS, ACTIVATIONS, LayerSpec, QModel
from qzo.quant import QTensor

CKPT_MAGIC = b"QZOT"
CKPT_VERSION = 1
DATA_MAGIC = b"QDS1"


class FormatError(ValueError):
    pass


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {self.what}: wanted {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def shape(self) -> tuple[int, ...]:
        (rank,) = self.unpack("I")
        if rank > 8:
            raise FormatError(f"implausible tensor rank {rank} in {self.what}")
        return tuple(self.unpack(f"{rank}I")) if rank else ()

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(dtype)


def _shape(dims) -> bytes:
    return struct.pack(f"<I{len(dims)}I", len(dims), *dims)


def _exact_f32(value: float, name: str) -> bytes:
    packed = struct.pack("<f", value)
    if struct.unpack("<f", packed)[0] != value:
        raise FormatError(f"{name}={value!r} is not representable as float32; checkpoint would be lossy")
    return packed


def checkpoint_bytes(model: QModel) -> bytes:
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<HII", CKPT_VERSION, len(model.layers), model.n_classes)
    for layer, block in zip(model.layers, model.block_of):
        out += struct.pack(
            "<BBbBB", KINDS.index(layer.kind), ACTIVATIONS.index(layer.activation),
            -1 if block is None else block, layer.stride, layer.padding,
        )
        out += _shape(layer.in_shape)
        out += _shape(layer.weight.shape if layer.has_params else ())
        for name in ("s_w", "s_x", "s_z"):
            out += _exact_f32(getattr(layer, name), name)
        if layer.has_params:
            out += layer.weight.data.astype("<i1").tobytes()
            out += layer.bias.data.astype("<i4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def checkpoint_save(model: QModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def checkpoint_from_bytes(buf: bytes) -> QModel:
    r = _Reader(buf, "checkpoint")
    if r.take(4) != CKPT_MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    (version,) = r.unpack("H")
    if version > CKPT_VERSION:
        raise FormatError(f"checkpoint version {version} is newer than supported version {CKPT_VERSION}")
    if version < 1:
        raise FormatError(f"invalid checkpoint version {version}")
    if len(buf) < 10:
        raise FormatError("truncated checkpoint")
    (stored,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != stored:
        raise FormatError("checkpoint checksum mismatch")
    r.buf = buf[:-4]
    n_layers, n_classes = r.unpack("II")
    layers, block_of = [], []
    for _ in range(n_layers):
        kind_i, act_i, block, stride, padding = r.unpack("BBbBB")
        if kind_i >= len(KINDS) or act_i >= len(ACTIVATIONS):
            raise FormatError(f"unknown layer kind/activation code {kind_i}/{act_i}")
        in_shape = r.shape()
        w_shape = r.shape()
        s_w, s_x, s_z = r.unpack("fff")
        kind = KINDS[kind_i]
        weight = bias = None
        if kind != "gap":
            weight = QTensor(r.array(np.int8, int(np.prod(w_shape))).reshape(w_shape), s_w, 8)
            bias = QTensor(r.array(np.int32, w_shape[0]), s_w * s_x, 32)
        layers.append(LayerSpec(
            kind, in_shape, s_x=s_x, s_z=s_z, s_w=s_w, weight=weight, bias=bias,
            activation=ACTIVATIONS[act_i], stride=stride, padding=padding,
        ))
        block_of.append(None if block < 0 else block)
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes in checkpoint")
    return QModel(layers, n_classes, block_of=block_of)


def checkpoint_load(path) -> QModel:
    return checkpoint_from_bytes(Path(path).read_bytes())


# -- datasets ----------------------------------------------------------------


def save_qds(path, pixels: np.ndarray, labels) -> None:
    """Write uint8 ``pixels`` of shape (N, C, H, W) and labels as QDS1."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 4 or pixels.dtype != np.uint8:
        raise FormatError("QDS1 pixels must be a uint8 (N, C, H, W) array")
    labels = np.asarray(labels, dtype="<u4")
    if labels.size != pixels.shape[0]:
        raise FormatError("one label per sample required")
    head = DATA_MAGIC + struct.pack("<4I", *pixels.shape)
    Path(path).write_bytes(head + pixels.tobytes() + labels.tobytes())


def load_qds(path) -> tuple[np.ndarray, np.ndarray]:
    """Return float inputs in [0, 1] of shape (N, C, H, W) and int labels."""
    r = _Reader(Path(path).read_bytes(), f"dataset {path}")
    if r.take(4) != DATA_MAGIC:
        raise FormatError(f"{path}: not a QDS1 dataset")
    n, c, h, w = r.unpack("4I")
    pixels = r.array(np.uint8, n * c * h * w).reshape(n, c, h, w)
    labels = r.array(np.uint32, n).astype(np.int64)
    return pixels.astype(np.float64) / 255.0, labels


def load_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """One row per sample, label in the first column, features after it."""
    rows = np.loadtxt(path, delimiter=",", ndmin=2)
    if rows.shape[1] < 2:
        raise FormatError(f"{path}: need a label column and at least one feature")
    labels = rows[:, 0]
    if not np.all(labels == np.round(labels)) or labels.min() < 0:
        raise FormatError(f"{path}: labels must be nonnegative integers")
    return rows[:, 1:], labels.astype(np.int64)


def load_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    if path.suffix.lower() == ".csv":
        return load_csv(path)
    return load_qds(path)
