import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fc_layer, small_cnn, small_mlp
from qzo.io import (
    FormatError,
    checkpoint_bytes,
    checkpoint_from_bytes,
    checkpoint_load,
    checkpoint_save,
    load_csv,
    load_dataset,
    load_qds,
    save_qds,
)
from qzo.model import (
    SCALE_FLOOR,
    Batch,
    FPLayer,
    FPModel,
    ModelError,
    QModel,
    balanced_split,
    forward,
    fp_forward,
    make_batch,
    partition_blocks,
    ptq_calibrate,
    to_float,
)
from qzo.quant import QTensor, dequantize


def chain(sizes):
    """FC chain with unit scales; one layer per size pair."""
    layers = [fc_layer(np.ones((b, a)), np.zeros(b)) for a, b in zip(sizes[:-1], sizes[1:])]
    return QModel(layers, sizes[-1])


class TestForward:
    def test_identity_layer_logits_and_loss(self):
        s_z = 0.5
        layer = fc_layer([[1, 0], [0, 1]], [0, 0], s_w=1.0, s_x=0.5, s_z=s_z)
        model = QModel([layer], 2)
        batch = Batch(QTensor(np.array([[3, 0]], dtype=np.int32), 0.5), [0])
        logits, losses = forward(model, batch)
        np.testing.assert_allclose(logits, [[1.5, 0.0]])
        p0 = np.exp(1.5) / (np.exp(1.5) + 1)
        np.testing.assert_allclose(losses, [-np.log(p0)])

    def test_zero_logits_give_ln2(self):
        model = QModel([fc_layer(np.zeros((2, 3)), [0, 0])], 2)
        batch = Batch(QTensor(np.ones((4, 3), dtype=np.int32), 1.0), [0, 1, 1, 0])
        np.testing.assert_allclose(forward(model, batch)[1], np.log(2))

    def test_empty_batch_rejected(self):
        with pytest.raises(ModelError):
            Batch(QTensor(np.zeros((0, 3), dtype=np.int32), 1.0), [])

    def test_label_out_of_range(self):
        model = QModel([fc_layer(np.zeros((2, 3)), [0, 0])], 2)
        with pytest.raises(ModelError, match="labels"):
            forward(model, Batch(QTensor(np.ones((1, 3), dtype=np.int32), 1.0), [2]))

    def test_repeatable(self, cnn_model):
        px = np.random.default_rng(0).integers(0, 255, size=(5, 1, 6, 6)) / 255
        b = make_batch(cnn_model, px, [0, 1, 0, 1, 1])
        a, c = forward(cnn_model, b), forward(cnn_model, b)
        assert np.array_equal(a[0], c[0]) and np.array_equal(a[1], c[1])

    def test_tracks_float_mirror(self, mlp_model):
        x = np.random.default_rng(1).normal(size=(20, 6))
        q_logits, _ = forward(mlp_model, make_batch(mlp_model, x, np.zeros(20, int)))
        f_logits = fp_forward(to_float(mlp_model), dequantize(make_batch(mlp_model, x, np.zeros(20, int)).inputs))
        assert np.max(np.abs(q_logits - f_logits)) < 0.1 * np.max(np.abs(f_logits))


class TestCalibration:
    def test_weight_scale_from_absmax(self):
        fp = FPModel([FPLayer("fc", np.array([[1.27, -0.5]]), np.zeros(1))], (2,), 1)
        m = ptq_calibrate(fp, np.ones((3, 2)))
        assert m.layers[0].s_w == pytest.approx(0.01, rel=1e-6)

    def test_zero_weights_get_floor(self):
        fp = FPModel([FPLayer("fc", np.zeros((2, 2)), np.zeros(2))], (2,), 2)
        m = ptq_calibrate(fp, np.ones((3, 2)))
        assert m.layers[0].s_w == SCALE_FLOOR
        assert not m.layers[0].weight.data.any()

    def test_empty_calibration_rejected(self):
        fp = FPModel([FPLayer("fc", np.ones((2, 2)), np.zeros(2))], (2,), 2)
        with pytest.raises(ModelError):
            ptq_calibrate(fp, np.zeros((0, 2)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_weight_rounding_error_bound(self, seed):
        w = np.random.default_rng(seed).normal(size=(4, 5))
        m = ptq_calibrate(FPModel([FPLayer("fc", w, np.zeros(4))], (5,), 4), np.ones((2, 5)))
        l = m.layers[0]
        assert np.all(np.abs(l.s_w * l.weight.data - w) <= l.s_w / 2 + 1e-12)

    def test_scale_chain(self, cnn_model):
        for prev, cur in zip(cnn_model.layers, cnn_model.layers[1:]):
            assert cur.s_x == prev.s_z

    def test_dimensions(self, cnn_model):
        conv = cnn_model.layers[0]
        assert conv.d_w == conv.weight.size + conv.bias.size
        assert conv.d_a == int(np.prod(conv.out_shape))


class TestPartition:
    def test_uniform_pairs(self):
        m = chain([2] * 9)
        assert partition_blocks(m, 4) == [0, 0, 1, 1, 2, 2, 3, 3]

    def test_heavy_first_layer(self):
        assert balanced_split([100, 1, 1, 1, 1], 4) == [0, 1, 2, 3, 3]

    def test_single_block(self):
        assert balanced_split([5, 1, 9], 1) == [0, 0, 0]

    def test_too_few_layers(self):
        with pytest.raises(ModelError):
            balanced_split([1, 2], 4)

    @given(st.lists(st.integers(1, 1000), min_size=1, max_size=12), st.integers(1, 6))
    def test_contiguous_cover(self, sizes, k):
        if len(sizes) < k:
            return
        a = balanced_split(sizes, k)
        assert a[0] == 0 and a[-1] == k - 1
        assert all(b - a_ in (0, 1) for a_, b in zip(a, a[1:]))

    def test_parameter_free_layers_have_no_block(self):
        m = small_cnn()
        assert len(m.layers) == 4
        b = partition_blocks(m, 4)
        assert b == [0, 1, 2, 3]


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        for m in (small_mlp(), small_cnn()):
            partition_blocks(m, min(3, len(m.trainable_layers())))
            checkpoint_save(m, tmp_path / "m.qzot")
            assert checkpoint_load(tmp_path / "m.qzot") == m

    def test_bad_magic(self):
        buf = bytearray(checkpoint_bytes(small_mlp()))
        buf[0:4] = b"XXXX"
        with pytest.raises(FormatError, match="magic"):
            checkpoint_from_bytes(bytes(buf))

    def test_newer_version(self):
        buf = bytearray(checkpoint_bytes(small_mlp()))
        buf[4:6] = struct.pack("<H", 2)
        buf[-4:] = struct.pack("<I", zlib.crc32(bytes(buf[:-4])))
        with pytest.raises(FormatError, match="version"):
            checkpoint_from_bytes(bytes(buf))

    def test_checksum(self):
        buf = bytearray(checkpoint_bytes(small_mlp()))
        buf[40] ^= 1
        with pytest.raises(FormatError, match="checksum"):
            checkpoint_from_bytes(bytes(buf))

    def test_truncated(self):
        buf = checkpoint_bytes(small_mlp())
        with pytest.raises(FormatError):
            checkpoint_from_bytes(buf[:7])

    def test_header_layout(self):
        m = small_mlp()
        buf = checkpoint_bytes(m)
        assert buf[:4] == b"QZOT"
        assert struct.unpack("<HI", buf[4:10]) == (1, len(m.layers))


class TestDatasets:
    def test_qds_roundtrip(self, tmp_path):
        px = np.arange(2 * 1 * 3 * 3, dtype=np.uint8).reshape(2, 1, 3, 3)
        save_qds(tmp_path / "d.qds", px, [1, 0])
        x, y = load_qds(tmp_path / "d.qds")
        np.testing.assert_allclose(x, px / 255.0)
        assert y.tolist() == [1, 0]

    def test_csv(self, tmp_path):
        (tmp_path / "d.csv").write_text("1,0.5,2\n0,1,-1\n")
        x, y = load_csv(tmp_path / "d.csv")
        assert y.tolist() == [1, 0] and x.shape == (2, 2)

    def test_csv_bad_label(self, tmp_path):
        (tmp_path / "d.csv").write_text("0.5,1,2\n")
        with pytest.raises(FormatError):
            load_csv(tmp_path / "d.csv")

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope.qds")
