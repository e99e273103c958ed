import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import fc_layer, small_cnn
from qzo.model import QModel, make_batch
from qzo.profiler import (
    METHODS,
    analytic_memory,
    engine_forwards,
    forward_macs,
    mac_count,
    memory_bytes,
    profile,
    profile_model,
    render_table,
)
from qzo.toy import image_task
from qzo.zo import PerturbConfig, train_step

dims = st.integers(1, 64)


def fc_4_to_2():
    return QModel([fc_layer(np.zeros((2, 4)), [0, 0])], 2)


class TestAnalyticMemory:
    def test_examples(self):
        assert analytic_memory(2, 4, 16, 1, 3, "inference") == 24
        assert analytic_memory(2, 4, 16, 1, 3, "NP-efficient") == 22
        assert analytic_memory(2, 4, 16, 1, 3, "BP") == 40

    def test_unknown_method(self):
        with pytest.raises(ValueError, match="method"):
            analytic_memory(1, 1, 1, 1, 1, "adam")

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            analytic_memory(0, 1, 1, 1, 1, "BP")

    @given(dims, dims, dims, dims, dims)
    def test_closed_forms(self, L, d_a, d_w, N, Q):
        expected = {
            "inference": N * (2 * d_a + d_w),
            "WP-vanilla": L * d_w,
            "WP-efficient": L * Q,
            "NP-vanilla": N * L * d_a + L * d_w,
            "NP-efficient": N * L * Q + d_w,
            "BP": N * L * d_a + L * d_w,
        }
        for m, v in expected.items():
            assert analytic_memory(L, d_a, d_w, N, Q, m) == v

    @given(dims, dims, dims, dims, dims, st.sampled_from(METHODS), st.integers(0, 4))
    def test_monotone(self, L, d_a, d_w, N, Q, method, k):
        args = [L, d_a, d_w, N, Q]
        bigger = list(args)
        bigger[k] += 1
        assert analytic_memory(*bigger, method) >= analytic_memory(*args, method)

    def test_bytes_widen_query_terms(self):
        assert memory_bytes(2, 4, 16, 1, 3, "WP-efficient") == 4 * 6
        assert memory_bytes(2, 4, 16, 1, 3, "NP-efficient") == 16 + 4 * 6
        assert memory_bytes(2, 4, 16, 1, 3, "BP") == 40


class TestMacs:
    def test_examples(self):
        m = fc_4_to_2()
        assert forward_macs(m) == 8
        assert mac_count(m, "inference", 1, 5) == 8
        assert mac_count(m, "WP-efficient", 1, 5) == 48
        assert mac_count(m, "BP", 1, 5) == 24

    def test_conv_macs(self, cnn_model):
        conv, dw, fc1, fc2 = cnn_model.layers
        c, ho, wo = conv.out_shape
        assert forward_macs(cnn_model) == c * ho * wo * 9 + c * ho * wo * 9 + fc1.weight.size + fc2.weight.size


class TestReports:
    def test_efficient_not_above_vanilla(self, cnn_model):
        for n, q in [(1, 1), (4, 10), (8, 100)]:
            r = {p.method: p for p in profile_model(cnn_model, n, q)}
            assert r["WP-efficient"].elements <= r["WP-vanilla"].elements or q > max(
                l.d_w for l in cnn_model.layers)
            assert all(p.elements >= 0 and p.macs >= 0 for p in r.values())

    def test_table_and_csv(self):
        reps = profile(2, 4, 16, 1, 3, 32)
        assert [r.method for r in reps] == list(METHODS)
        assert "NP-efficient" in render_table(reps)
        assert reps[4].csv_row().startswith("NP-efficient,22,")

    def test_engine_counts_match_prediction(self):
        m = small_cnn(seed=2)
        px, y = image_task(5, hw=6, seed=2)
        b = make_batch(m, px / 255.0, y)
        for mode, q in [("adaptive", 8), ("layer-wp", 12), ("layer-np", 4), ("model-wp", 7)]:
            conf = PerturbConfig(mode, q, 1, 3)
            rep = train_step(m.clone(), b, conf, 0.01)
            assert rep.forwards == engine_forwards(m, conf, 5)
            if q % 4 == 0 or mode == "model-wp":
                assert rep.forwards * forward_macs(m) == mac_count(m, "WP-efficient", 5, q)
