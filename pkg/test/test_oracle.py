"""Tests for the finite-difference and pooled-statistics oracles."""

import numpy as np
import pytest

from memorized_batchnorm.errors import ArgumentError
from memorized_batchnorm.norm import NormMode
from memorized_batchnorm.oracle import (
    compare_grads,
    draw_inputs,
    fd_gradient,
    gradcheck_layer,
    gradcheck_mlp,
    pooled_stats,
)
from memorized_batchnorm.stats import BatchStats, StatsMemory, memorized_stats, push, weights_for_memory


class TestFdGradient:
    """Test central differences."""

    def test_sum_of_squares(self):
        grad = fd_gradient(lambda x: float(np.sum(x**2)), np.array([1.0, 2.0]))
        np.testing.assert_allclose(grad, [2.0, 4.0], rtol=1e-8)

    def test_constant_function(self):
        np.testing.assert_array_equal(fd_gradient(lambda x: 3.0, np.zeros((2, 2))), np.zeros((2, 2)))

    def test_does_not_mutate_input(self):
        x = np.array([0.5, -1.5])
        fd_gradient(lambda v: float(np.sum(np.sin(v))), x)
        np.testing.assert_array_equal(x, [0.5, -1.5])

    def test_invalid_step(self):
        with pytest.raises(ArgumentError):
            fd_gradient(lambda x: 0.0, np.zeros(1), h=0.0)


class TestPooledStats:
    """Test statistics computed directly over samples."""

    def test_equal_weights(self):
        mean, var = pooled_stats([[[0.0], [2.0]], [[4.0], [6.0]]], [1.0, 1.0])
        np.testing.assert_allclose(mean, [3.0])
        np.testing.assert_allclose(var, [5.0])

    def test_weighted(self):
        mean, var = pooled_stats([[[-1.0], [1.0]], [[3.0], [5.0]]], [0.5, 1.0])
        np.testing.assert_allclose(mean, [8.0 / 3.0], rtol=1e-12)
        np.testing.assert_allclose(var, [123.0 / 27.0], rtol=1e-12)

    def test_bad_weights(self):
        with pytest.raises(ArgumentError):
            pooled_stats([[[0.0]]], [0.0])
        with pytest.raises(ArgumentError):
            pooled_stats([[[0.0]], [[1.0]]], [1.0])

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_memorized_estimator(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 6))
        dim = int(rng.integers(1, 5))
        batches = [
            rng.normal(rng.normal(), rng.uniform(0.5, 2.0), size=(int(rng.integers(2, 9)), dim)) for _ in range(k + 1)
        ]
        memory = StatsMemory(capacity=k, eta=float(rng.uniform(0.5, 1.0)), lam=float(rng.uniform(0.0, 1.0)))
        for batch in batches[:-1]:
            push(memory, BatchStats.from_tensor(batch))
        current = BatchStats.from_tensor(batches[-1])
        mean, var = memorized_stats(memory, current)
        ref_mean, ref_var = pooled_stats(batches, weights_for_memory(memory).tolist())
        np.testing.assert_allclose(mean, ref_mean, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(var, ref_var, rtol=1e-10, atol=1e-12)


class TestCompareGrads:
    """Test the mixed tolerance comparison."""

    def test_within_tolerance(self):
        report = compare_grads([1.0, 2.0], [1.0 + 1e-7, 2.0])
        assert report.passed
        assert report.failures == 0

    def test_outside_tolerance(self):
        report = compare_grads([1.0, 2.0], [1.1, 2.0], name="w")
        assert not report.passed
        assert report.failures == 1
        assert report.worst[0].index == (0,)
        assert report.format_line().startswith("FAIL")

    def test_zero_gradients(self):
        report = compare_grads(np.zeros(3), np.full(3, 1e-9))
        assert report.passed

    def test_shape_mismatch(self):
        with pytest.raises(ArgumentError):
            compare_grads(np.zeros(2), np.zeros(3))


class TestGradcheck:
    """Test the gradient-check suites."""

    @pytest.mark.parametrize("mode", list(NormMode))
    def test_layer_suite_passes(self, mode):
        reports = gradcheck_layer(mode, instances=20, seed=3)
        assert reports
        assert all(r.passed for r in reports), [r.format_line() for r in reports if not r.passed]

    @pytest.mark.parametrize("mode", [NormMode.MBN, NormMode.MOVNORM])
    def test_bn_reduction_included(self, mode):
        reports = gradcheck_layer(mode, lam=0.0, instances=100)
        assert any(r.name.startswith("reduction.") for r in reports)
        assert all(r.passed for r in reports), [r.format_line() for r in reports if not r.passed]

    @pytest.mark.parametrize("memory_k", [0, 4])
    @pytest.mark.parametrize("batch", [2, 3])
    @pytest.mark.parametrize("mode", list(NormMode))
    def test_tiny_batches_pass(self, mode, batch, memory_k):
        for seed in range(3):
            reports = gradcheck_layer(mode, batch=batch, features=5, memory_k=memory_k, seed=seed, instances=20)
            assert all(r.passed for r in reports), [r.format_line() for r in reports if not r.passed]

    @pytest.mark.parametrize("seed", range(20))
    def test_draw_inputs_spread(self, seed):
        x = draw_inputs(np.random.default_rng(seed), 2, 5)
        assert x.shape == (2, 5)
        assert np.all(x.std(axis=0) >= 0.5 - 1e-12)

    def test_draw_inputs_single_row(self):
        assert draw_inputs(np.random.default_rng(0), 1, 3).shape == (1, 3)

    @pytest.mark.parametrize("mode", [NormMode.BN, NormMode.MBN, NormMode.MOVNORM])
    def test_mlp_passes(self, mode):
        reports = gradcheck_mlp(mode=mode, seed=1)
        assert all(r.passed for r in reports), [r.format_line() for r in reports if not r.passed]

    def test_mlp_rejects_brn(self):
        with pytest.raises(ArgumentError):
            gradcheck_mlp(mode=NormMode.BRN)
