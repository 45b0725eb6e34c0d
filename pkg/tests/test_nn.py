import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import naive
from phrasetts import nn
from phrasetts.errors import ShapeMismatch
from phrasetts.model import ModelConfig, weight_manifest

TOL = 1e-5
ORACLE = settings(max_examples=100, deadline=None)
seeds = st.integers(0, 2**32 - 1)


def arr(rng, *shape, scale=1.0):
    return (rng.standard_normal(shape) * scale).astype(np.float32)


class TestConv2d:
    def test_delta_kernel_alignment(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]], np.float32)
        k = np.zeros((1, 1, 3, 3), np.float32)
        k[0, 0, 1, 1] = 1.0
        out = nn.conv2d(x, k)
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == 1.0

    def test_zero_kernel(self, rng):
        out = nn.conv2d(arr(rng, 2, 5, 7), np.zeros((3, 2, 3, 3), np.float32))
        assert out.shape == (3, 3, 4) and not out.any()

    def test_naive_example(self, rng):
        x, k, b = arr(rng, 1, 5, 7), arr(rng, 2, 1, 3, 3), arr(rng, 2)
        np.testing.assert_allclose(nn.conv2d(x, k, b), naive.conv2d(x, k, b), atol=1e-6)

    @pytest.mark.parametrize("H", range(1, 11))
    @pytest.mark.parametrize("W", range(1, 11))
    def test_output_shape(self, H, W):
        out = nn.conv2d(np.ones((2, H, W), np.float32), np.ones((4, 2, 3, 3), np.float32))
        assert out.shape == (4, -(-H // 2), -(-W // 2))

    @ORACLE
    @given(seeds, st.integers(1, 3), st.integers(1, 3), st.integers(1, 9), st.integers(1, 9),
           st.sampled_from([(3, 3), (1, 1), (5, 3)]), st.sampled_from([(2, 2), (1, 1), (1, 2)]))
    def test_matches_naive(self, seed, c_in, c_out, H, W, ksize, stride):
        rng = np.random.default_rng(seed)
        x, k, b = arr(rng, c_in, H, W), arr(rng, c_out, c_in, *ksize), arr(rng, c_out)
        np.testing.assert_allclose(nn.conv2d(x, k, b, stride), naive.conv2d(x, k, b, stride), atol=TOL)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            nn.conv2d(np.ones((2, 4, 4)), np.ones((1, 3, 3, 3)))


class TestConv1d:
    @ORACLE
    @given(seeds, st.integers(1, 12), st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 3, 5, 31]))
    def test_matches_naive(self, seed, T, c_in, c_out, k):
        rng = np.random.default_rng(seed)
        x, w, b = arr(rng, T, c_in), arr(rng, c_out, c_in, k), arr(rng, c_out)
        out = nn.conv1d(x, w, b)
        assert out.shape == (T, c_out)
        np.testing.assert_allclose(out, naive.conv1d(x, w, b), atol=TOL)


class TestBatchNorm:
    def test_identity_parameters(self, rng):
        x = arr(rng, 4, 6)
        out = nn.batch_norm_inference(x, np.zeros(4), np.ones(4), np.ones(4), np.zeros(4), eps=1e-5)
        np.testing.assert_allclose(out, x, atol=1e-5 * np.abs(x).max() + 1e-6)

    def test_shift(self):
        out = nn.batch_norm_inference(np.zeros((1, 3)), [0.0], [1.0], [1.0], [5.0])
        np.testing.assert_allclose(out, 5.0, atol=1e-4)

    @ORACLE
    @given(seeds, st.integers(1, 5), st.integers(1, 6))
    def test_matches_scalar(self, seed, C, n):
        rng = np.random.default_rng(seed)
        x = arr(rng, C, n)
        mean, gamma, beta = arr(rng, C), arr(rng, C), arr(rng, C)
        var = (rng.random(C) + 0.1).astype(np.float32)
        out = nn.batch_norm_inference(x, mean, var, gamma, beta)
        np.testing.assert_allclose(out, naive.batch_norm(x, mean, var, gamma, beta, 1e-5), atol=TOL)

    def test_channel_axis(self, rng):
        x = arr(rng, 5, 3)
        mean, var, gamma, beta = arr(rng, 3), np.full(3, 2.0, np.float32), arr(rng, 3), arr(rng, 3)
        a = nn.batch_norm_inference(x, mean, var, gamma, beta, axis=1)
        b = nn.batch_norm_inference(x.T, mean, var, gamma, beta, axis=0).T
        np.testing.assert_array_equal(a, b)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatch):
            nn.batch_norm_inference(np.ones((3, 2)), *[np.ones(2)] * 4)


def rnn_params(rng, d_in, H, gates, cls):
    return cls(arr(rng, d_in, gates * H, scale=0.5), arr(rng, H, gates * H, scale=0.5),
               arr(rng, gates * H, scale=0.5), arr(rng, gates * H, scale=0.5))


class TestGRU:
    def test_zero_weights_stay_zero(self):
        p = nn.GRUParams(*(np.zeros(s, np.float32) for s in ((3, 6), (2, 6), (6,), (6,))))
        out, h = nn.gru_forward(np.ones((4, 3), np.float32), p)
        assert not out.any() and not h.any()

    def test_single_step_scalar_oracle(self, rng):
        p = rnn_params(rng, 3, 2, 3, nn.GRUParams)
        x, h0 = arr(rng, 1, 3), arr(rng, 2)
        out, h = nn.gru_forward(x, p, h0)
        ref, _ = naive.gru(x, *p, h0=h0)
        np.testing.assert_allclose(out, ref, atol=1e-6)
        np.testing.assert_array_equal(h, out[-1])
        np.testing.assert_allclose(nn.gru_cell(x[0], h0, p), ref[0], atol=1e-6)

    @ORACLE
    @given(seeds, st.integers(1, 6), st.integers(1, 5), st.integers(1, 5), st.booleans())
    def test_matches_naive(self, seed, T, d_in, H, with_h0):
        rng = np.random.default_rng(seed)
        p = rnn_params(rng, d_in, H, 3, nn.GRUParams)
        x = arr(rng, T, d_in)
        h0 = arr(rng, H) if with_h0 else None
        out, h = nn.gru_forward(x, p, h0)
        ref, ref_h = naive.gru(x, *p, h0=h0)
        np.testing.assert_allclose(out, ref, atol=TOL)
        np.testing.assert_allclose(h, ref_h, atol=TOL)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            nn.gru_forward(arr(rng, 2, 4), rnn_params(rng, 3, 2, 3, nn.GRUParams))


class TestLSTM:
    def test_zero_weights_stay_zero(self):
        p = nn.LSTMParams(*(np.zeros(s, np.float32) for s in ((3, 8), (2, 8), (8,), (8,))))
        out, (h, c) = nn.lstm_forward(np.ones((4, 3), np.float32), p)
        assert not out.any() and not h.any() and not c.any()

    def test_single_step_scalar_oracle(self, rng):
        p = rnn_params(rng, 3, 2, 4, nn.LSTMParams)
        x = arr(rng, 1, 3)
        out, (h, c) = nn.lstm_forward(x, p)
        ref, ref_h, ref_c = naive.lstm(x, *p)
        np.testing.assert_allclose(out, ref, atol=1e-6)
        np.testing.assert_allclose(c, ref_c, atol=1e-6)
        np.testing.assert_array_equal(h, out[-1])

    def test_cell_matches_forward(self, rng):
        p = rnn_params(rng, 4, 3, 4, nn.LSTMParams)
        x = arr(rng, 5, 4)
        out, final = nn.lstm_forward(x, p)
        state = (np.zeros(3, np.float32), np.zeros(3, np.float32))
        for t in range(5):
            state = nn.lstm_cell(x[t], state, p)
            np.testing.assert_allclose(state[0], out[t], atol=1e-6)
        np.testing.assert_allclose(state[1], final[1], atol=1e-6)

    @ORACLE
    @given(seeds, st.integers(1, 6), st.integers(1, 5), st.integers(1, 5), st.booleans())
    def test_matches_naive(self, seed, T, d_in, H, with_state):
        rng = np.random.default_rng(seed)
        p = rnn_params(rng, d_in, H, 4, nn.LSTMParams)
        x = arr(rng, T, d_in)
        state = (arr(rng, H), arr(rng, H)) if with_state else None
        out, (h, c) = nn.lstm_forward(x, p, state)
        ref, ref_h, ref_c = naive.lstm(x, *p, *(state or (None, None)))
        np.testing.assert_allclose(out, ref, atol=TOL)
        np.testing.assert_allclose(c, ref_c, atol=TOL)


class TestLinear:
    def test_identity(self, rng):
        x = arr(rng, 3, 4)
        np.testing.assert_array_equal(nn.linear(x, np.eye(4, dtype=np.float32), np.zeros(4)), x)

    def test_zero_input_gives_bias(self, rng):
        b = arr(rng, 5)
        np.testing.assert_array_equal(nn.linear(np.zeros(3), arr(rng, 3, 5), b), b)

    @ORACLE
    @given(seeds, st.integers(1, 4), st.integers(1, 8), st.integers(1, 8))
    def test_matches_naive(self, seed, rows, d_in, d_out):
        rng = np.random.default_rng(seed)
        x, w, b = arr(rng, rows, d_in), arr(rng, d_in, d_out), arr(rng, d_out)
        np.testing.assert_allclose(nn.linear(x, w, b), naive.linear(x, w, b), atol=TOL)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            nn.linear(np.ones(3), np.ones((4, 2)))


class TestActivations:
    def test_sigmoid_extremes(self):
        out = nn.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])

    def test_relu_tanh(self):
        np.testing.assert_array_equal(nn.relu([-1.0, 0.0, 2.0]), [0.0, 0.0, 2.0])
        np.testing.assert_allclose(nn.tanh_op([0.5]), [np.tanh(0.5)], rtol=1e-6)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(nn.softmax([0.0, 0.0]), [0.5, 0.5])

    def test_no_overflow(self):
        out = nn.softmax([1000.0, 0.0])
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-7)

    def test_high_precision_example(self, rng):
        x = arr(rng, 12, scale=3.0)
        np.testing.assert_allclose(nn.softmax(x), naive.softmax_mp(x), atol=1e-7)

    @ORACLE
    @given(seeds, st.integers(1, 20), st.sampled_from([0.1, 1.0, 10.0, 100.0]))
    def test_matches_mpmath(self, seed, n, scale):
        x = arr(np.random.default_rng(seed), n, scale=scale)
        out = nn.softmax(x)
        np.testing.assert_allclose(out, naive.softmax_mp(x), atol=TOL)
        assert (out >= 0).all() and abs(float(out.sum()) - 1.0) < 1e-6

    @ORACLE
    @given(seeds, st.integers(1, 20), st.floats(-50, 50))
    def test_shift_invariant(self, seed, n, c):
        x = arr(np.random.default_rng(seed), n)
        np.testing.assert_allclose(nn.softmax(x + np.float32(c)), nn.softmax(x), atol=1e-6)

    def test_last_axis(self, rng):
        x = arr(rng, 3, 4)
        np.testing.assert_allclose(nn.softmax(x).sum(axis=-1), 1.0, atol=1e-6)


class TestAttention:
    def test_single_key(self, rng):
        ctx, w = nn.dot_attention(arr(rng, 3), arr(rng, 1, 4), arr(rng, 1, 5), arr(rng, 3, 2), arr(rng, 4, 2))
        np.testing.assert_array_equal(w, [1.0])

    def test_identical_keys_uniform(self, rng):
        keys = np.tile(arr(rng, 1, 4), (6, 1))
        _, w = nn.dot_attention(arr(rng, 3), keys, arr(rng, 6, 2), arr(rng, 3, 5), arr(rng, 4, 5))
        np.testing.assert_allclose(w, 1 / 6, atol=1e-7)

    @ORACLE
    @given(seeds, st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))
    def test_matches_naive(self, seed, N, dq, dk, A, dv):
        rng = np.random.default_rng(seed)
        args = arr(rng, dq), arr(rng, N, dk), arr(rng, N, dv), arr(rng, dq, A), arr(rng, dk, A)
        ctx, w = nn.dot_attention(*args)
        ref_ctx, ref_w = naive.attention(*args)
        np.testing.assert_allclose(ctx, ref_ctx, atol=TOL)
        np.testing.assert_allclose(w, ref_w, atol=TOL)
        assert abs(float(w.sum()) - 1.0) < 1e-6

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            nn.dot_attention(arr(rng, 3), arr(rng, 2, 4), arr(rng, 2, 5), arr(rng, 3, 2), arr(rng, 4, 3))


class TestInit:
    def test_frozen_stream(self):
        # PCG64 seeded through SeedSequence is specified bit-for-bit by numpy
        assert nn.SeededRng(0).stream("embedding").random(3).tolist() == [
            0.09897604394264681, 0.9018473279908976, 0.3789204491615322]

    def test_deterministic(self):
        manifest = weight_manifest(ModelConfig.small(20))
        a = nn.init_weights(manifest, nn.SeededRng(5))
        b = nn.init_weights(manifest, nn.SeededRng(5))
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_order_independent(self):
        manifest = [("a", (3, 4)), ("b", (4, 4))]
        a = nn.init_weights(manifest, nn.SeededRng(1))
        b = nn.init_weights(manifest[::-1], nn.SeededRng(1))
        assert a["a"].tobytes() == b["a"].tobytes()

    def test_bounds(self):
        w = nn.init_weights([("w", (40, 25))], nn.SeededRng(3))["w"]
        a = np.sqrt(6.0 / 65)
        assert w.size == 1000 and np.abs(w).max() <= a
        assert np.abs(w).max() > 0.9 * a

    def test_conv_fans(self):
        assert nn.fan_in_out((32, 1, 3, 3)) == (9, 288)
        w = nn.init_weights([("k", (32, 1, 3, 3))], nn.SeededRng(0))["k"]
        assert np.abs(w).max() <= np.sqrt(6.0 / 297)

    def test_names_are_salted(self):
        manifest = weight_manifest(ModelConfig.small(20))
        w = nn.init_weights(manifest, nn.SeededRng(0))
        heads = {w[name].ravel()[:4].tobytes() for name, _ in manifest}
        assert len(heads) == len(manifest)

    def test_seeds_differ(self):
        manifest = [("w", (8, 8))]
        assert not np.array_equal(nn.init_weights(manifest, nn.SeededRng(0))["w"],
                                  nn.init_weights(manifest, nn.SeededRng(1))["w"])
