"""Weighted reconstruction scaling and average re-referencing."""

import numpy as np
import pytest

from nasr.postproc import (
    WeightedCache,
    average_rereference,
    average_rereference_backward,
    weighted_reconstruction,
    weighted_reconstruction_backward,
)
from nasr.validation import ParameterError


class TestWeightedReconstruction:
    def test_zero_mask_is_identity_bitwise(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 8))
        out = weighted_reconstruction(x, np.zeros(3), rng.uniform(0, 2, 3))
        np.testing.assert_array_equal(out, x)

    def test_hand_example(self):
        x = np.array([[5.0, 5.0], [2.0, 2.0]])
        out = weighted_reconstruction(
            x, np.array([0.0, 1.0]), np.array([3.0, 0.5])
        )
        np.testing.assert_array_equal(out[0], [5.0, 5.0])
        np.testing.assert_allclose(out[1], [1.0, 1.0], atol=1e-12)

    def test_unit_weights_identity(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 6))
        mask = np.array([1.0, 0.0, 1.0, 0.0])
        out = weighted_reconstruction(x, mask, np.ones(4))
        np.testing.assert_array_equal(out, x)

    def test_linear_in_input(self):
        rng = np.random.default_rng(2)
        x1, x2 = rng.normal(size=(2, 3, 10))
        mask = np.array([1.0, 0.0, 1.0])
        w = rng.uniform(0, 2, 3)
        lhs = weighted_reconstruction(2 * x1 + 3 * x2, mask, w)
        rhs = 2 * weighted_reconstruction(x1, mask, w) \
            + 3 * weighted_reconstruction(x2, mask, w)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 3, 8))
        mask = rng.integers(0, 2, size=(5, 3)).astype(float)
        w = rng.uniform(0, 2, 3)
        batch = weighted_reconstruction(x, mask, w)
        for b in range(5):
            np.testing.assert_array_equal(
                batch[b], weighted_reconstruction(x[b], mask[b], w)
            )


class TestWeightedBackward:
    def test_zero_mask_zero_weight_grad(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 8))
        cache = WeightedCache(xhat=x, mask=np.zeros(3), w=np.ones(3))
        _, d_w, _ = weighted_reconstruction_backward(rng.normal(size=x.shape), cache)
        np.testing.assert_array_equal(d_w, 0.0)

    def test_single_masked_channel_formula(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 8))
        mask = np.array([0.0, 1.0, 0.0])
        cache = WeightedCache(xhat=x, mask=mask, w=np.ones(3))
        _, d_w, _ = weighted_reconstruction_backward(x, cache)
        np.testing.assert_allclose(d_w[1], (x[1] ** 2).sum(), atol=1e-12)
        assert d_w[0] == 0.0 and d_w[2] == 0.0

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(4, 10))
        mask = np.array([1.0, 0.0, 1.0, 1.0])
        w = rng.uniform(0.5, 1.5, 4)
        target = rng.normal(size=x.shape)

        def loss(wv):
            out = weighted_reconstruction(x, mask, wv)
            return ((out - target) ** 2).sum()

        out = weighted_reconstruction(x, mask, w)
        upstream = 2 * (out - target)
        _, d_w, _ = weighted_reconstruction_backward(
            upstream, WeightedCache(xhat=x, mask=mask, w=w)
        )
        h = 1e-6
        for c in range(4):
            e = np.zeros(4)
            e[c] = h
            fd = (loss(w + e) - loss(w - e)) / (2 * h)
            assert abs(d_w[c] - fd) <= 1e-6 * max(1.0, abs(fd))


class TestAverageRereference:
    def test_zero_input(self):
        out = average_rereference(np.zeros((3, 5)))
        np.testing.assert_array_equal(out, 0.0)

    def test_hand_example(self):
        # column (1,3): r = 4/3, output (-1/3, 5/3)
        x = np.array([[1.0], [3.0]])
        np.testing.assert_allclose(
            average_rereference(x), [[-1 / 3], [5 / 3]], atol=1e-12
        )

    def test_column_sum_identity(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(6, 12))
        out = average_rereference(x)
        np.testing.assert_allclose(
            out.sum(axis=0), x.sum(axis=0) / 7.0, atol=1e-12
        )

    def test_idempotence_as_linear_map(self):
        rng = np.random.default_rng(8)
        c = 5
        m = np.eye(c) - np.ones((c, c)) / (c + 1)
        x = rng.normal(size=(c, 9))
        once = average_rereference(x)
        twice = average_rereference(once)
        np.testing.assert_allclose(twice, m @ m @ x, atol=1e-12)

    def test_constant_offset_shift(self):
        rng = np.random.default_rng(9)
        c = 4
        x = rng.normal(size=(c, 7))
        k = 2.5
        shifted = average_rereference(x + k)
        np.testing.assert_allclose(
            shifted, average_rereference(x) + k / (c + 1), atol=1e-12
        )

    def test_strict_mean_denominator(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(4, 6))
        out = average_rereference(x, denominator="c")
        np.testing.assert_allclose(out, x - x.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(out.sum(axis=0), 0.0, atol=1e-12)

    def test_unknown_denominator(self):
        with pytest.raises(ParameterError):
            average_rereference(np.zeros((2, 2)), denominator="bogus")

    def test_backward_is_transpose(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(5, 8))
        g = rng.normal(size=(5, 8))
        # <A x, g> == <x, A^T g>; A is symmetric here
        lhs = (average_rereference(x) * g).sum()
        rhs = (x * average_rereference_backward(g)).sum()
        assert abs(lhs - rhs) < 1e-10
