"""The trainable reconstruction layer: masks, reconstruction, gradients."""

import math

import numpy as np
import pytest

from nasr.layer import (
    EigenCache,
    NasrConfig,
    NasrParams,
    backward,
    batch_eigen,
    channel_spread,
    check_vector,
    discard_mask,
    forward,
    load_checkpoint,
    noise_mask,
    reconstruct,
    round_half_up,
    save_checkpoint,
    threshold,
)
from nasr.linalg import sym_eig
from nasr.validation import ParameterError


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def random_orthonormal(rng, n):
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return q


class TestThreshold:
    def test_default_init(self):
        assert threshold(NasrParams(k=0.71, k_offset=0.1)) == pytest.approx(0.81)

    def test_lower_bound(self):
        assert threshold(NasrParams(k=0.0, k_offset=0.1)) == pytest.approx(0.1)

    def test_sum(self):
        assert threshold(NasrParams(k=1.9, k_offset=0.1)) == pytest.approx(2.0)

    def test_invalid_params(self):
        with pytest.raises(ParameterError):
            NasrParams(k=-0.1)
        with pytest.raises(ParameterError):
            NasrParams(l=1.5)
        with pytest.raises(ParameterError):
            NasrParams(k_offset=0.05)


class TestCheckVector:
    def test_identity_rows(self):
        np.testing.assert_allclose(check_vector(0.81, np.eye(3)), 0.81)

    def test_rotation_rows(self):
        s = 1 / np.sqrt(2)
        v = np.array([[s, s], [s, -s]])
        np.testing.assert_allclose(
            check_vector(0.81, v), 0.81 * np.sqrt(2), atol=1e-12
        )

    def test_linear_in_threshold(self):
        rng = np.random.default_rng(0)
        v = random_orthonormal(rng, 5)
        np.testing.assert_allclose(
            check_vector(2.0, v), 2 * check_vector(1.0, v), atol=1e-12
        )

    def test_nonpositive_threshold_rejected(self):
        with pytest.raises(ParameterError):
            check_vector(0.0, np.eye(2))


class TestDiscardMask:
    def test_hand_example(self):
        # D=(4,0), Check=(0.81,0.81): Diff=(3.19,-0.81), mean|Diff|=2,
        # NormDiff=(1.595,-0.405), soft=sigmoid(20*NormDiff)
        params = NasrParams()
        soft, hard = discard_mask(
            np.array([4.0, 0.0]), np.array([0.81, 0.81]), params
        )
        np.testing.assert_allclose(
            soft, [sigmoid(20 * 1.595), sigmoid(20 * -0.405)], atol=1e-9
        )
        assert abs(soft[1] - 3.04e-4) < 1e-5
        np.testing.assert_array_equal(hard, [1.0, 0.0])

    def test_tie_rounds_up(self):
        params = NasrParams()
        soft, hard = discard_mask(np.ones(3), np.ones(3), params)
        np.testing.assert_allclose(soft, 0.5)
        np.testing.assert_array_equal(hard, 1.0)

    def test_all_below_check(self):
        params = NasrParams()
        _, hard = discard_mask(np.zeros(4), np.full(4, 5.0), params)
        np.testing.assert_array_equal(hard, 0.0)


class TestRoundHalfUp:
    def test_half_goes_up(self):
        np.testing.assert_array_equal(
            round_half_up(np.array([0.5, 0.49, 0.51, 1.5])), [1, 0, 1, 2]
        )


class TestChannelSpread:
    def test_zero_discard(self):
        rng = np.random.default_rng(1)
        v = random_orthonormal(rng, 4)
        np.testing.assert_array_equal(channel_spread(np.zeros(4), v), 0.0)

    def test_full_discard_orthonormal(self):
        rng = np.random.default_rng(2)
        v = random_orthonormal(rng, 6)
        np.testing.assert_allclose(channel_spread(np.ones(6), v), 1.0, atol=1e-12)

    def test_hand_example(self):
        s = 1 / np.sqrt(2)
        v = np.array([[s, s], [s, -s]])
        np.testing.assert_allclose(
            channel_spread(np.array([1.0, 0.0]), v), [0.5, 0.5], atol=1e-12
        )

    def test_bounded_for_orthonormal(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n = rng.integers(2, 16)
            v = random_orthonormal(rng, n)
            d = rng.uniform(0, 1, n)
            spread = channel_spread(d, v)
            assert (spread >= -1e-12).all() and (spread <= 1 + 1e-12).all()


class TestNoiseMask:
    def test_spread_at_threshold(self):
        soft, hard = noise_mask(np.array([0.5]), NasrParams(l=0.5))
        np.testing.assert_allclose(soft, 0.5)
        np.testing.assert_array_equal(hard, 1.0)

    def test_high_spread(self):
        soft, hard = noise_mask(np.array([1.0]), NasrParams(l=0.5))
        assert abs(soft[0] - sigmoid(10.0)) < 1e-12
        assert hard[0] == 1.0

    def test_low_spread(self):
        soft, hard = noise_mask(np.array([0.0]), NasrParams(l=0.5))
        assert abs(soft[0] - sigmoid(-10.0)) < 1e-12
        assert abs(soft[0] - 4.54e-5) < 1e-6
        assert hard[0] == 0.0


class TestReconstruct:
    def test_no_noise_is_identity_bitwise(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 16))
        out = reconstruct(x, np.zeros(3), NasrConfig())
        np.testing.assert_array_equal(out, x)

    def test_hand_example(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = reconstruct(x, np.array([0.0, 1.0]), NasrConfig())
        np.testing.assert_allclose(out, [[1.0, 2.0], [1.0, 2.0]], atol=1e-12)

    def test_all_noisy_gives_zeros(self):
        x = np.arange(8.0).reshape(2, 4)
        out = reconstruct(x, np.ones(2), NasrConfig())
        np.testing.assert_array_equal(out, 0.0)

    def test_neighbor_reconstruction(self):
        # ring of 3: noisy channel 0 takes the mean of its neighbors'
        # filled signals, which equal the originals here
        x = np.array([[9.0, 9.0], [1.0, 2.0], [3.0, 6.0]])
        adj = np.array([[0, 1, 1], [1, 0, 1], [1, 1, 0]])
        cfg = NasrConfig(reconstruct_neighbors=True, adjacency=adj)
        out = reconstruct(x, np.array([1.0, 0.0, 0.0]), cfg)
        np.testing.assert_allclose(out[0], [2.0, 4.0], atol=1e-12)
        np.testing.assert_array_equal(out[1:], x[1:])

    def test_neighbors_require_adjacency(self):
        with pytest.raises(ParameterError):
            reconstruct(
                np.zeros((2, 4)), np.zeros(2),
                NasrConfig(reconstruct_neighbors=True),
            )


def make_batch(rng, b=6, c=5, w=48, burst=None):
    x = rng.normal(size=(b, c, w))
    if burst is not None:
        win, ch, scale = burst
        x[win, ch] *= scale
    return x


def make_correlated_batch(rng, b=8, c=6, w=48, burst=None):
    """Shared narrow-band sources over smooth spatial patterns, plus a
    white floor: the kind of structure the layer is designed around."""
    t = np.arange(w) / 100.0
    x = 0.3 * rng.normal(size=(b, c, w))
    for f in (10.0, 20.0):
        pat = rng.uniform(0.3, 1.0, size=c)
        phase = rng.uniform(0, 2 * np.pi, size=b)
        x += pat[None, :, None] * np.sin(
            2 * np.pi * f * t[None, None, :] + phase[:, None, None]
        )
    x /= x.std()
    if burst is not None:
        win, ch, scale = burst
        x[win, ch] *= scale
    return x


class TestForward:
    def test_clean_batch_high_threshold_passthrough(self):
        rng = np.random.default_rng(5)
        x = make_batch(rng)
        params = NasrParams(k=500.0)  # threshold above every eigenvalue
        out = forward(x, params, NasrConfig(s_nonoverlap=20))
        assert not out.noise_mask.any()
        np.testing.assert_array_equal(out.recon, x)

    def test_burst_channel_flagged_others_untouched(self):
        rng = np.random.default_rng(6)
        x = make_correlated_batch(rng, burst=(3, 2, 50.0))
        out = forward(x, NasrParams(), NasrConfig(s_nonoverlap=20))
        mask = out.noise_mask[:, :, 0]
        assert mask[3, 2]
        # the other channels of the burst window are untouched, bitwise
        assert not mask[3, [0, 1, 3, 4, 5]].any()
        np.testing.assert_array_equal(out.recon[3, [0, 1, 3, 4, 5]],
                                      x[3, [0, 1, 3, 4, 5]])
        clean_mask = ~mask
        np.testing.assert_array_equal(out.recon[clean_mask], x[clean_mask])
        # flags stay sparse across the batch
        assert mask.sum() <= 0.15 * mask.size

    def test_deterministic(self):
        rng = np.random.default_rng(7)
        x = make_batch(rng)
        out1 = forward(x, NasrParams(), NasrConfig(s_nonoverlap=16))
        out2 = forward(x.copy(), NasrParams(), NasrConfig(s_nonoverlap=16))
        np.testing.assert_array_equal(out1.recon, out2.recon)
        np.testing.assert_array_equal(out1.noise_soft, out2.noise_soft)

    def test_hard_soft_consistency(self):
        rng = np.random.default_rng(8)
        x = make_batch(rng, b=10, burst=(2, 1, 30.0))
        out = forward(x, NasrParams(), NasrConfig(s_nonoverlap=20))
        np.testing.assert_array_equal(
            out.noise_mask[:, :, 0], round_half_up(out.noise_soft).astype(bool)
        )

    def test_full_window_covariance_flag(self):
        rng = np.random.default_rng(9)
        x = make_batch(rng)
        e_trail = batch_eigen(x, NasrConfig(s_nonoverlap=20))
        e_full = batch_eigen(x, NasrConfig(covariance_full_window=True))
        assert not np.allclose(e_trail.d, e_full.d)

    def test_eigen_cache_matches_inline(self):
        rng = np.random.default_rng(10)
        x = make_batch(rng)
        cfg = NasrConfig(s_nonoverlap=20)
        cache = batch_eigen(x, cfg)
        out1 = forward(x, NasrParams(), cfg)
        out2 = forward(x, NasrParams(), cfg, eigen=cache)
        np.testing.assert_array_equal(out1.recon, out2.recon)


class TestInvariants:
    def test_order_invariance_of_components(self):
        # permuting eigenpairs consistently permutes the index-aligned
        # quantities and leaves row sums and spread unchanged
        rng = np.random.default_rng(11)
        params = NasrParams()
        for _ in range(10):
            n = int(rng.integers(3, 10))
            v = random_orthonormal(rng, n)
            d = np.sort(rng.uniform(0, 5, n))[::-1]
            perm = rng.permutation(n)
            check = check_vector(threshold(params), v)
            np.testing.assert_allclose(
                check_vector(threshold(params), v[:, perm]), check, atol=1e-12
            )
            soft, hard = discard_mask(d, check, params)
            soft_p, hard_p = discard_mask(d[perm], check[perm], params)
            np.testing.assert_allclose(soft_p, soft[perm], atol=1e-12)
            np.testing.assert_array_equal(hard_p, hard[perm])
            np.testing.assert_allclose(
                channel_spread(hard[perm], v[:, perm]),
                channel_spread(hard, v),
                atol=1e-12,
            )

    def test_l_monotonicity(self):
        rng = np.random.default_rng(12)
        spread = rng.uniform(0, 1, size=(20, 8))
        for l0 in (0.1, 0.4, 0.7):
            lo, _ = noise_mask(spread, NasrParams(l=l0))
            hi, _ = noise_mask(spread, NasrParams(l=l0 + 0.05))
            assert (hi <= lo + 1e-15).all()

    def test_k_monotonicity_fixed_normalization(self):
        # raising the threshold lowers every diff entry, hence every
        # discard score once the shared normalization scale is fixed
        rng = np.random.default_rng(13)
        for _ in range(10):
            n = int(rng.integers(3, 12))
            v = random_orthonormal(rng, n)
            d = rng.uniform(0, 5, n)
            rowabs = np.abs(v).sum(axis=1)
            params = NasrParams(k=float(rng.uniform(0, 2)))
            diff_lo = d - threshold(params) * rowabs
            params_hi = NasrParams(k=params.k + 0.3)
            diff_hi = d - threshold(params_hi) * rowabs
            assert (diff_hi < diff_lo).all()
            denom = max(np.abs(diff_lo).mean(), params.eps)
            soft_lo = 1 / (1 + np.exp(-params.tau_d * diff_lo / denom))
            soft_hi = 1 / (1 + np.exp(-params.tau_d * diff_hi / denom))
            assert (soft_hi <= soft_lo).all()

    def test_spread_bounds_in_forward(self):
        rng = np.random.default_rng(14)
        x = make_batch(rng, b=12, c=8, burst=(1, 3, 40.0))
        cfg = NasrConfig(s_nonoverlap=20)
        eig = batch_eigen(x, cfg)
        out = forward(x, NasrParams(), cfg, eigen=eig)
        spread = channel_spread(
            round_half_up(out.discard_soft)[:, None, :].repeat(8, 1)[:, 0, :],
            eig.v[0],
        )
        assert (out.noise_soft >= 0).all() and (out.noise_soft <= 1).all()
        assert (spread >= -1e-12).all()


class SmoothPipe:
    """Smooth forward + quadratic loss, for finite-difference checks."""

    def __init__(self, x, config, target, weights):
        self.x = x
        self.config = config
        self.eigen = batch_eigen(x, config)
        self.target = target
        self.weights = weights

    def loss(self, k, l):
        params = NasrParams(k=k, l=l)
        out = forward(self.x, params, self.config, eigen=self.eigen, hard=False)
        r = out.recon - self.target
        return float((self.weights * r * r).sum())

    def grads(self, k, l):
        params = NasrParams(k=k, l=l)
        out, cache = forward(
            self.x, params, self.config, eigen=self.eigen, hard=False,
            want_cache=True,
        )
        g = 2.0 * self.weights * (out.recon - self.target)
        lg = backward(g, cache)
        return lg.dk, lg.dl


def relerr(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def fd(f, x0, h=1e-4):
    return (f(x0 + h) - f(x0 - h)) / (2 * h)


class TestBackward:
    def _pipe(self, rng, neighbors=False, c=5):
        x = rng.normal(size=(4, c, 32))
        x[1, 2] *= 8.0
        adj = None
        if neighbors:
            adj = (np.ones((c, c)) - np.eye(c)).astype(int)
        cfg = NasrConfig(
            s_nonoverlap=16, reconstruct_neighbors=neighbors, adjacency=adj
        )
        target = rng.normal(size=x.shape)
        weights = rng.uniform(0.5, 1.5, size=x.shape)
        return SmoothPipe(x, cfg, target, weights)

    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(15)
        x = rng.normal(size=(3, 4, 24))
        _, cache = forward(
            x, NasrParams(), NasrConfig(s_nonoverlap=12), want_cache=True
        )
        lg = backward(np.zeros_like(x), cache)
        assert lg.dk == 0.0 and lg.dl == 0.0

    def test_dl_opposes_noise_soft_gradient(self):
        # increasing l decreases noise_soft, so dl and the loss gradient
        # w.r.t. noise_soft have opposite signs; checked against central
        # finite differences of the smooth forward
        rng = np.random.default_rng(16)
        pipe = self._pipe(rng)
        k, l = 0.7, 0.45
        dk_a, dl_a = pipe.grads(k, l)
        dl_fd = fd(lambda lv: pipe.loss(k, lv), l)
        assert relerr(dl_a, dl_fd) < 1e-3

    @pytest.mark.parametrize("neighbors", [False, True])
    def test_gradients_match_finite_differences(self, neighbors):
        rng = np.random.default_rng(17)
        pipe = self._pipe(rng, neighbors=neighbors)
        checked = 0
        attempts = 0
        while checked < 8 and attempts < 80:
            attempts += 1
            k = float(rng.uniform(0.05, 1.5))
            l = float(rng.uniform(0.1, 0.9))
            dk_a, dl_a = pipe.grads(k, l)
            # skip saturated points where the derivative signal vanishes
            if abs(dk_a) < 1e-8 or abs(dl_a) < 1e-8:
                continue
            dk_fd = fd(lambda kv: pipe.loss(kv, l), k)
            dl_fd = fd(lambda lv: pipe.loss(k, lv), l)
            assert relerr(dk_a, dk_fd) < 1e-3, (k, l, dk_a, dk_fd)
            assert relerr(dl_a, dl_fd) < 1e-3, (k, l, dl_a, dl_fd)
            checked += 1
        assert checked >= 5

    def test_missing_cache_is_usage_error(self):
        with pytest.raises(ParameterError):
            backward(np.zeros((1, 2, 3)), None)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        params = NasrParams(k=0.3, l=0.6, k_offset=0.15)
        w = np.array([1.0, 0.5, 2.0])
        save_checkpoint(tmp_path / "ckpt.json", params, w)
        back = load_checkpoint(tmp_path / "ckpt.json")
        assert back["k"] == 0.3 and back["l"] == 0.6
        assert back["k_offset"] == 0.15
        np.testing.assert_array_equal(back["scaling_w"], w)

    def test_missing_field_rejected(self, tmp_path):
        (tmp_path / "bad.json").write_text('{"k": 1.0}')
        with pytest.raises(ParameterError):
            load_checkpoint(tmp_path / "bad.json")
