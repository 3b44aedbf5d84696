import math

import numpy as np
import pytest

from cnnlstm_ids import layers as ly
from cnnlstm_ids.errors import DimensionError, ParameterError, UsageError
from cnnlstm_ids.gradcheck import LAYER_CHECKS, TOLERANCE
from cnnlstm_ids.tensor import Rng


def conv_params(kernels, bias):
    return ly.ConvBlockParams(np.asarray(kernels, dtype=float), np.asarray(bias, dtype=float))


def zero_lstm(H, D):
    return ly.LstmParams(**{f"{k}_{g}": np.zeros((H, D) if k == "w" else (H, H) if k == "u" else H)
                            for g in ly.GATES for k in "wub"})


def random_lstm(seed, H, D):
    return ly.init_lstm(Rng(seed), H, D)


class TestConv:
    def test_hand_cross_correlation(self):
        out, cache = ly.conv_block_forward(np.array([[1.0], [2.0], [3.0]]), conv_params([[[1.0], [0.0], [-1.0]]], [0.0]))
        assert out.tolist() == [[0.0]]
        assert cache.data["pre"].ravel().tolist() == [-2.0]

    def test_zero_kernels(self):
        x = Rng(0).random((7, 2))
        out, _ = ly.conv_block_forward(x, conv_params(np.zeros((3, 2, 2)), np.zeros(3)))
        assert np.array_equal(out, np.zeros((6, 3)))

    def test_identity_filter(self):
        out, _ = ly.conv_block_forward(np.array([[1.0], [-2.0], [3.0]]), conv_params([[[1.0]]], [0.0]))
        assert out.ravel().tolist() == [1.0, 0.0, 3.0]

    def test_matches_loop_definition(self):
        rng = Rng(4)
        x = rng.random((9, 3)) - 0.5
        p = conv_params(rng.random((5, 4, 3)) - 0.5, rng.random(5) - 0.5)
        out, _ = ly.conv_block_forward(x, p)
        ref = np.zeros((6, 5))
        for t in range(6):
            for c in range(5):
                s = p.bias[c]
                for k in range(4):
                    for j in range(3):
                        s += x[t + k, j] * p.kernels[c, k, j]
                ref[t, c] = max(s, 0.0)
        assert np.allclose(out, ref, atol=1e-14)

    def test_too_short(self):
        with pytest.raises(DimensionError):
            ly.conv_block_forward(np.ones((2, 1)), conv_params(np.ones((1, 3, 1)), [0.0]))

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            ly.conv_block_forward(np.ones((5, 2)), conv_params(np.ones((1, 3, 1)), [0.0]))

    def test_inconsistent_params(self):
        with pytest.raises(DimensionError):
            conv_params(np.ones((2, 3, 1)), np.zeros(3))


class TestMaxpool:
    def test_window_maxima(self):
        out, _ = ly.maxpool_forward(np.array([[1.0], [3.0], [2.0], [5.0]]), 2)
        assert out.ravel().tolist() == [3.0, 5.0]

    def test_constant(self):
        out, _ = ly.maxpool_forward(np.full((6, 2), 4.0), 2)
        assert np.array_equal(out, np.full((3, 2), 4.0))

    def test_remainder_dropped(self):
        out, _ = ly.maxpool_forward(np.array([[1.0], [3.0], [2.0]]), 2)
        assert out.ravel().tolist() == [3.0]

    def test_backward_routes_to_argmax(self):
        _, cache = ly.maxpool_forward(np.array([[1.0], [3.0], [2.0], [5.0]]), 2)
        dx, grads = ly.layer_backward(cache, np.array([[0.7], [-1.3]]))
        assert dx.ravel().tolist() == [0.0, 0.7, 0.0, -1.3]
        assert grads == {}

    def test_first_index_wins_ties(self):
        _, cache = ly.maxpool_forward(np.array([[2.0], [2.0]]), 2)
        dx, _ = ly.layer_backward(cache, np.array([[1.0]]))
        assert dx.ravel().tolist() == [1.0, 0.0]

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient_conservation(self, seed):
        rng = Rng(seed)
        h = rng.random((3, 11, 4))
        out, cache = ly.maxpool_forward(h, 2)
        g = rng.random(out.shape) - 0.5
        dx, _ = ly.layer_backward(cache, g)
        assert math.isclose(dx.sum(), g.sum(), abs_tol=1e-12)

    def test_errors(self):
        with pytest.raises(DimensionError):
            ly.maxpool_forward(np.ones((1, 1)), 2)
        with pytest.raises(ParameterError):
            ly.maxpool_forward(np.ones((4, 1)), 1)


class TestFlattenConcat:
    def test_row_major(self):
        f, _ = ly.flatten(np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert f.tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_single(self):
        f, _ = ly.flatten(np.array([[9.0]]))
        assert f.tolist() == [9.0]

    @pytest.mark.parametrize("L,C", [(1, 5), (7, 3), (4, 64)])
    def test_round_trip(self, L, C):
        p = Rng(L * C).random((L, C))
        f, _ = ly.flatten(p)
        assert f.shape == (L * C,)
        assert np.array_equal(ly.unflatten(f, L, C), p)

    def test_concat(self):
        assert ly.concat(np.array([1.0, 2.0]), np.array([3.0])).tolist() == [1.0, 2.0, 3.0]
        assert ly.concat(np.array([]), np.array([5.0])).tolist() == [5.0]

    @pytest.mark.parametrize("a,b", [(1, 1), (3, 8), (0, 4)])
    def test_concat_lengths_and_backward(self, a, b):
        out, cache = ly.concat_forward(np.arange(a, dtype=float), np.arange(b, dtype=float))
        assert out.shape == (a + b,)
        (ga, gb), _ = ly.layer_backward(cache, np.arange(a + b, dtype=float))
        assert ga.tolist() == list(range(a)) and gb.tolist() == list(range(a, a + b))


class TestLstm:
    def test_zero_params_give_zero_state(self):
        x = Rng(2).random((6, 3))
        hT, all_h, cache = ly.lstm_forward(x, zero_lstm(4, 3))
        assert np.array_equal(hT, np.zeros(4)) and np.array_equal(all_h, np.zeros((6, 4)))
        gates = ly.lstm_gates(cache)
        for g in "ifo":
            assert np.all(gates[g] == 0.5)
        assert np.all(gates["c"] == 0.0)

    @pytest.mark.parametrize("beta", [-2.0, 0.3, 1.7])
    def test_single_step_closed_form(self, beta):
        p = zero_lstm(1, 1)
        p.b_c[:] = beta
        hT, _, cache = ly.lstm_forward(np.array([[0.9]]), p)
        expected_c = 0.5 * math.tanh(beta)
        assert cache.data["cs"][1].item() == pytest.approx(expected_c, abs=1e-15)
        assert hT.item() == pytest.approx(0.5 * math.tanh(expected_c), abs=1e-15)

    def test_matches_per_gate_equations(self):
        rng = Rng(8)
        p = random_lstm(8, 3, 2)
        for g in ly.GATES:
            getattr(p, f"b_{g}")[:] = rng.random(3) - 0.5
        x = rng.random((5, 2))
        h, c = np.zeros(3), np.zeros(3)
        sig = lambda v: 1.0 / (1.0 + np.exp(-v))
        ref = []
        for t in range(5):
            i = sig(p.w_i @ x[t] + p.u_i @ h + p.b_i)
            f = sig(p.w_f @ x[t] + p.u_f @ h + p.b_f)
            o = sig(p.w_o @ x[t] + p.u_o @ h + p.b_o)
            cand = np.tanh(p.w_c @ x[t] + p.u_c @ h + p.b_c)
            c = f * c + i * cand
            h = o * np.tanh(c)
            ref.append(h)
        _, all_h, _ = ly.lstm_forward(x, p)
        assert np.allclose(all_h, np.array(ref), atol=1e-14)

    def test_gate_codomain(self):
        p = random_lstm(3, 5, 2)
        x = (Rng(3).random((3, 20, 2)) - 0.5) * 20
        _, _, cache = ly.lstm_forward(x, p)
        g = ly.lstm_gates(cache)
        for name in "ifo":
            assert np.all((g[name] > 0) & (g[name] < 1))
        assert np.all(np.abs(g["c"]) < 1)

    def test_batch_matches_single(self):
        p = random_lstm(5, 4, 1)
        x = Rng(5).random((3, 7, 1))
        _, batched, _ = ly.lstm_forward(x, p)
        for b in range(3):
            _, single, _ = ly.lstm_forward(x[b], p)
            assert np.allclose(single, batched[b], atol=1e-15)

    def test_input_size_mismatch(self):
        with pytest.raises(DimensionError):
            ly.lstm_forward(np.ones((4, 3)), zero_lstm(2, 2))

    def test_final_state_gradient_equals_padded_sequence_gradient(self):
        p = random_lstm(6, 3, 2)
        x = Rng(6).random((4, 2))
        g = Rng(7).random(3)
        _, _, c1 = ly.lstm_forward(x, p)
        _, _, c2 = ly.lstm_forward(x, p)
        full = np.zeros((4, 3))
        full[-1] = g
        dx1, g1 = ly.layer_backward(c1, g)
        dx2, g2 = ly.layer_backward(c2, full)
        assert np.array_equal(dx1, dx2)
        assert all(np.array_equal(g1[k], g2[k]) for k in g1)

    def test_backward_results_survive_later_backward_calls(self):
        # scratch memory is shared between calls; returned gradients must not be
        p = random_lstm(8, 3, 2)
        xa, xb = Rng(8).random((2, 5, 2)), Rng(9).random((2, 5, 2))
        ga, gb = Rng(10).random((2, 5, 3)), Rng(11).random((2, 5, 3))
        dxa, grads_a = ly.layer_backward(ly.lstm_forward(xa, p)[2], ga)
        snapshot = (dxa.copy(), {k: v.copy() for k, v in grads_a.items()})
        ly.layer_backward(ly.lstm_forward(xb, p)[2], gb)
        assert np.array_equal(dxa, snapshot[0])
        assert all(np.array_equal(grads_a[k], snapshot[1][k]) for k in grads_a)


class TestDense:
    def test_identity_relu(self):
        c = np.array([-1.0, 2.0])
        out, _ = ly.dense_forward(c, ly.DenseParams(np.eye(2), np.zeros(2)), "relu")
        assert out.tolist() == [0.0, 2.0]

    def test_hand_values(self):
        p = ly.DenseParams(np.array([[1.0, 1.0]]), np.array([-5.0]))
        assert ly.dense_forward(np.array([2.0, 2.0]), p, "relu")[0].tolist() == [0.0]
        assert ly.dense_forward(np.array([2.0, 2.0]), p, "none")[0].tolist() == [-1.0]

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            ly.dense_forward(np.ones(3), ly.DenseParams(np.ones((1, 2)), np.zeros(1)))


class TestDropout:
    def test_rate_zero(self):
        y = Rng(1).random(10)
        out, cache = ly.dropout_forward(y, 0.0, "train", Rng(1))
        assert np.array_equal(out, y) and np.all(cache.data["mask"] == 1)

    @pytest.mark.parametrize("m", [0.0, 0.4, 0.9])
    def test_infer_identity(self, m):
        y = Rng(2).random(10)
        assert np.array_equal(ly.dropout_forward(y, m, "infer")[0], y)

    def test_fixed_mask(self):
        out, _ = ly.dropout_forward(np.array([2.0, 4.0, 6.0, 8.0]), 0.5, "train", mask=[1, 0, 1, 0])
        assert out.tolist() == [4.0, 0.0, 12.0, 0.0]

    @pytest.mark.parametrize("m", [-0.1, 1.0, 1.5])
    def test_bad_rate(self, m):
        with pytest.raises(ParameterError):
            ly.dropout_forward(np.ones(3), m, "train", Rng(0))

    def test_expectation(self):
        y = np.array([0.5, 1.0, 2.0, 3.0])
        m, n = 0.4, 10_000
        base = Rng(123)
        outs = np.array([ly.dropout_forward(y, m, "train", base.split(s))[0] for s in range(n)])
        sem = outs.std(axis=0, ddof=1) / math.sqrt(n)
        assert np.all(np.abs(outs.mean(axis=0) - y) <= 3 * sem)


class TestBackwardContract:
    def _caches(self):
        rng = Rng(0)
        x = rng.random((2, 9, 1))
        conv = ly.conv_block_forward(x, ly.init_conv(rng, 3, 2, 1))
        pool = ly.maxpool_forward(conv[0], 2)
        flat = ly.flatten(pool[0])
        lstm = ly.lstm_forward(x, ly.init_lstm(rng, 3, 1))
        cat = ly.concat_forward(lstm[0], flat[0])
        dense = ly.dense_forward(cat[0], ly.init_dense(rng, 4, cat[0].shape[1]))
        drop = ly.dropout_forward(dense[0], 0.4, "train", rng)
        return {"conv": conv, "pool": pool, "flatten": flat, "lstm": (lstm[1], lstm[2]),
                "concat": cat, "dense": dense, "dropout": drop}

    def test_zero_upstream_gives_zero_gradients(self):
        for name, (out, cache) in self._caches().items():
            dx, grads = ly.layer_backward(cache, np.zeros_like(out))
            parts = dx if isinstance(dx, tuple) else (dx,)
            assert all(np.all(p == 0) for p in parts), name
            assert all(np.all(g == 0) for g in grads.values()), name

    def test_reused_cache_rejected(self):
        for name, (out, cache) in self._caches().items():
            ly.layer_backward(cache, np.ones_like(out))
            with pytest.raises(UsageError):
                ly.layer_backward(cache, np.ones_like(out))

    def test_wrong_upstream_shape(self):
        for name, (out, cache) in self._caches().items():
            with pytest.raises(UsageError):
                ly.layer_backward(cache, np.ones(out.shape + (2,)))

    @pytest.mark.parametrize("kind", sorted(k for k in LAYER_CHECKS))
    def test_finite_differences(self, kind):
        errors = [LAYER_CHECKS[kind](seed) for seed in range(10)]
        assert max(errors) <= TOLERANCE


class TestInit:
    def test_glorot_bounds_and_zero_bias(self):
        p = ly.init_dense(Rng(0), 30, 50)
        lim = math.sqrt(6 / 80)
        assert np.all(np.abs(p.w) <= lim) and np.all(p.b == 0)
        lstm = ly.init_lstm(Rng(0), 8, 3)
        assert all(np.all(getattr(lstm, f"b_{g}") == 0) for g in ly.GATES)
