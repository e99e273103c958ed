import numpy as np
import pytest

from conftest import small_cnn, small_mlp
from qzo.model import FPLayer, FPModel, make_batch, to_float
from qzo.oracle import (
    bp_grad_fp,
    central_difference,
    cosine_similarity,
    finite_diff_grad,
    grad_check,
    layerwise_variance,
    variance_report,
)
from qzo.toy import image_task


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


class TestBackprop:
    def test_single_fc_by_hand(self):
        w = np.array([[1.0, -1.0], [0.5, 2.0]])
        fp = FPModel([FPLayer("fc", w, np.zeros(2))], (2,), 2)
        x, y = np.array([[1.0, 2.0]]), np.array([1])
        z = w @ x[0]
        p = np.exp(z) / np.exp(z).sum()
        gz = p - np.array([0.0, 1.0])
        gw, gb = bp_grad_fp(fp, x, y)[0]
        np.testing.assert_allclose(gw, np.outer(gz, x[0]))
        np.testing.assert_allclose(gb, gz)

    def test_zero_upstream(self):
        # identical logits for both classes and a symmetric target distribution
        fp = FPModel([FPLayer("fc", np.zeros((2, 3)), np.zeros(2))], (3,), 2)
        x = np.ones((2, 3))
        gw, gb = bp_grad_fp(fp, x, np.array([0, 1]))[0]
        assert not gw.any() and not gb.any()

    @pytest.mark.parametrize("builder", [small_mlp, small_cnn])
    def test_matches_finite_differences(self, builder):
        m = builder(seed=3)
        fp = to_float(m)
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, size=(4,) + tuple(m.input_shape))
        y = rng.integers(0, 2, size=4)
        bp = bp_grad_fp(fp, x, y)
        fd = finite_diff_grad(fp, x, y, h=1e-5)
        for a, b in zip(bp, fd):
            if a is None:
                assert b is None
                continue
            assert rel_err(a[0], b[0]) < 1e-5
            assert rel_err(a[1], b[1]) < 1e-5

    def test_gap_layer(self):
        rng = np.random.default_rng(2)
        fp = FPModel([FPLayer("conv2d", rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2), "relu", 1, 1),
                      FPLayer("gap"), FPLayer("fc", rng.normal(size=(2, 2)), np.zeros(2))], (1, 4, 4), 2)
        x = rng.uniform(size=(3, 1, 4, 4))
        bp, fd = bp_grad_fp(fp, x, [0, 1, 1]), finite_diff_grad(fp, x, [0, 1, 1])
        assert bp[1] is None
        assert rel_err(bp[0][0], fd[0][0]) < 1e-5

    def test_unsupported_kind(self):
        with pytest.raises(ValueError):
            bp_grad_fp(FPModel([FPLayer("pool", np.ones((1, 1)))], (1,), 1), np.ones((1, 1)), [0])


class TestFiniteDiff:
    def test_square(self):
        g = central_difference(lambda t: float(t[0] ** 2), np.array([3.0]), h=1e-3)
        assert g[0] == pytest.approx(6.0, abs=1e-6)

    def test_linear_is_exact_for_any_h(self):
        c = np.array([0.5, -2.0, 3.0])
        for h in (1e-4, 0.5, 2.0):
            g = central_difference(lambda t: float(c @ t), np.zeros(3), h=h)
            np.testing.assert_allclose(g, c, rtol=1e-12)

    def test_restores_argument(self):
        theta = np.array([1.0, 2.0])
        central_difference(lambda t: float(t.sum()), theta)
        assert theta.tolist() == [1.0, 2.0]

    def test_rejects_nonpositive_h(self):
        fp = FPModel([FPLayer("fc", np.ones((1, 1)), np.zeros(1))], (1,), 1)
        with pytest.raises(ValueError):
            finite_diff_grad(fp, np.ones((1, 1)), [0], h=0)


class TestCosine:
    def test_examples(self):
        assert cosine_similarity([1, 2], [1, 2]) == pytest.approx(1.0)
        assert cosine_similarity([1, 0], [0, 1]) == 0.0
        assert cosine_similarity([1, 0], [1, 1]) == pytest.approx(1 / np.sqrt(2))

    def test_zero_vectors(self):
        assert cosine_similarity([0, 0], [0, 0]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            cosine_similarity([1], [1, 2])


class TestVariance:
    def test_deterministic_quadratic(self):
        r = variance_report(d=3, n=1, q=1, S=1.0, V=0.0, trials=20_000, seed=1)
        assert r.theoretical == pytest.approx(2.0)
        assert r.rel_dev < 0.05

    def test_one_dimension(self):
        r = variance_report(d=1, n=1, q=1, S=1.0, V=0.0, trials=2000, seed=1)
        assert r.theoretical == 0.0
        assert r.empirical < 1e-6

    def test_doubling_queries_halves(self):
        a = variance_report(d=20, n=2, q=5, S=1.0, V=0.0, trials=10_000, seed=2)
        b = variance_report(d=20, n=2, q=10, S=1.0, V=0.0, trials=10_000, seed=3)
        assert b.theoretical == pytest.approx(a.theoretical / 2)
        assert b.rel_dev < 0.05 and a.rel_dev < 0.05

    def test_exact_law_with_sample_noise(self):
        r = variance_report(d=10, n=2, q=5, S=1.0, V=1.0, trials=10_000, seed=4)
        assert r.rel_dev_exact < 0.05

    def test_csv(self):
        r = variance_report(d=2, n=1, q=1, trials=100)
        assert len(r.csv_row().split(",")) == len(r.CSV_HEADER.split(","))


class TestLayerwiseOrdering:
    def test_weight_perturbation(self):
        model, layer = layerwise_variance(d=3, L=4, n=2, q=8, trials=2000, seed=1)
        assert layer <= model

    def test_node_perturbation_with_conversion(self):
        model, layer = layerwise_variance(d=3, L=4, n=2, q=8, trials=2000, seed=2, act=[1.0, -2.0, 0.5])
        assert layer <= model

    def test_needs_a_query_per_layer(self):
        with pytest.raises(ValueError):
            layerwise_variance(d=3, L=4, n=1, q=3)


class TestGradCheck:
    def test_rows(self):
        m = small_cnn(seed=0)
        px, y = image_task(8, hw=6, seed=0)
        rows = grad_check(m, make_batch(m, px / 255.0, y), queries=8, seed=2)
        assert [r.layer for r in rows] == [0, 1, 2, 3]
        assert [r.chosen for r in rows] == ["WP", "WP", "NP", "NP"]
        for r in rows:
            assert -1 <= r.adaptive <= 1
            assert len(r.csv_row().split(",")) == len(r.CSV_HEADER.split(","))
