import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from jointdefer.errors import InvalidArgumentError, StateError, TrainingDivergenceError
from jointdefer.numerics import (Adam, Dense, RandomStream, cross_entropy, cross_entropy_from_logits,
                                 dense_backward, dense_forward, finite_diff_gradient, optimizer_step,
                                 relative_error, softmax)

finite_logits = arrays(np.float64, st.integers(2, 8),
                       elements=st.floats(-50, 50, allow_nan=False, allow_infinity=False))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax([0, 0, 0]), [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_log2(self):
        np.testing.assert_allclose(softmax([math.log(2), 0, 0]), [0.5, 0.25, 0.25], atol=1e-15)

    def test_large_logit_no_overflow(self):
        with np.errstate(over="raise"):
            p = softmax([100.0, 0.0, 0.0])
        assert p[0] == pytest.approx(1.0)
        assert p[1] < 1e-40 and np.all(np.isfinite(p))

    @pytest.mark.parametrize("bad", [[], [1.0], [np.nan, 0.0], [np.inf, 0.0]])
    def test_rejects_bad_input(self, bad):
        with pytest.raises(InvalidArgumentError):
            softmax(bad)

    @given(finite_logits, st.floats(-100, 100))
    def test_sums_to_one_and_shift_invariant(self, z, c):
        p = softmax(z)
        assert abs(p.sum() - 1.0) <= 1e-9
        assert np.all((p >= 0) & (p <= 1))
        np.testing.assert_allclose(softmax(z + c), p, rtol=0, atol=1e-12)

    def test_batch_rows(self):
        Z = np.array([[0.0, 0.0], [math.log(3), 0.0]])
        np.testing.assert_allclose(softmax(Z), [[0.5, 0.5], [0.75, 0.25]], atol=1e-15)


class TestCrossEntropy:
    def test_perfect(self):
        loss, _ = cross_entropy([1.0, 0.0, 0.0], 0)
        assert loss == 0.0

    def test_uniform(self):
        loss, _ = cross_entropy([1 / 3] * 3, 2)
        assert loss == pytest.approx(math.log(3), abs=1e-12)
        assert round(loss, 4) == 1.0986

    def test_gradient_is_p_minus_onehot(self):
        _, g = cross_entropy([0.5, 0.25, 0.25], 0)
        np.testing.assert_array_equal(g, [-0.5, 0.25, 0.25])

    def test_target_out_of_range(self):
        with pytest.raises(InvalidArgumentError):
            cross_entropy([0.5, 0.5], 2)

    @given(finite_logits, st.data())
    def test_nonnegative_and_matches_logit_form(self, z, data):
        t = data.draw(st.integers(0, len(z) - 1))
        p = softmax(z)
        loss_p, g_p = cross_entropy(p, t)
        loss_z, g_z = cross_entropy_from_logits(z, t)
        assert loss_z >= 0
        assert loss_z == pytest.approx(loss_p, rel=1e-9, abs=1e-12)
        np.testing.assert_allclose(g_z, g_p, atol=1e-12)

    def test_zero_iff_certain(self):
        assert cross_entropy([0.0, 1.0], 1)[0] == 0.0
        assert cross_entropy([1e-3, 1 - 1e-3], 1)[0] > 0.0

    def test_logit_gradient_matches_finite_differences(self):
        z = np.array([0.3, -1.2, 2.0])
        numeric = finite_diff_gradient(lambda v: cross_entropy_from_logits(v, 1)[0], z)
        np.testing.assert_allclose(cross_entropy_from_logits(z, 1)[1], numeric, atol=1e-9)


class TestDense:
    def test_identity(self):
        x = np.array([1.5, -2.0, 0.25])
        y, _ = dense_forward(np.eye(3), np.zeros(3), x, "identity")
        np.testing.assert_array_equal(y, x)

    @pytest.mark.parametrize("act,fn", [("identity", lambda c: c), ("relu", lambda c: np.maximum(c, 0)),
                                        ("tanh", np.tanh)])
    def test_zero_weights_gives_activation_of_bias(self, act, fn):
        c = np.array([-1.0, 0.5])
        y, _ = dense_forward(np.zeros((2, 3)), c, np.array([4.0, 5.0, 6.0]), act)
        np.testing.assert_array_equal(y, fn(c))

    def test_hand_computed_relu(self):
        y, _ = dense_forward([[1, 2], [3, 4]], [0, 0], [1, 1], "relu")
        np.testing.assert_array_equal(y, [3.0, 7.0])

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            dense_forward(np.zeros((2, 3)), np.zeros(2), np.zeros(2))
        with pytest.raises(InvalidArgumentError):
            dense_forward(np.zeros((2, 3)), np.zeros(3), np.zeros(3))

    def test_identity_backward_closed_form(self):
        W = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        x = np.array([0.5, -1.0])
        g = np.array([1.0, -2.0, 0.5])
        _, cache = dense_forward(W, np.zeros(3), x)
        gW, gb, gx = dense_backward(cache, g)
        np.testing.assert_array_equal(gx, W.T @ g)
        np.testing.assert_array_equal(gW, np.outer(g, x))
        np.testing.assert_array_equal(gb, g)

    def test_relu_all_negative_gives_zero_gradient(self):
        W = -np.ones((2, 3))
        _, cache = dense_forward(W, -np.ones(2), np.ones(3), "relu")
        for grad in dense_backward(cache, np.array([1.0, 1.0])):
            assert not np.any(grad)

    def test_backward_without_forward(self):
        layer = Dense(np.eye(2), np.zeros(2))
        with pytest.raises(StateError):
            layer.backward(np.ones(2))
        with pytest.raises(StateError):
            dense_backward(None, np.ones(2))

    @pytest.mark.parametrize("act", ["identity", "relu", "tanh"])
    def test_gradients_match_finite_differences(self, act):
        stream = RandomStream(3)
        W = stream.uniform(-1, 1, (4, 5))
        b = stream.uniform(-1, 1, 4)
        X = stream.uniform(-1, 1, (3, 5))
        G = stream.uniform(-1, 1, (3, 4))

        def f_W(w):
            return float(np.sum(dense_forward(w, b, X, act)[0] * G))

        def f_b(v):
            return float(np.sum(dense_forward(W, v, X, act)[0] * G))

        def f_x(v):
            return float(np.sum(dense_forward(W, b, v, act)[0] * G))

        _, cache = dense_forward(W, b, X, act)
        gW, gb, gx = dense_backward(cache, G)
        for analytic, numeric in ((gW, finite_diff_gradient(f_W, W)), (gb, finite_diff_gradient(f_b, b)),
                                  (gx, finite_diff_gradient(f_x, X))):
            err = relative_error(analytic, numeric)
            # relu kinks can land within eps of a sample; allow the 1% budget
            assert np.mean(err < 1e-4) >= 0.99


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        params = {"w": np.array([1.0, -2.0])}
        opt = Adam(lr=0.1)
        optimizer_step(params, {"w": np.zeros(2)}, opt)
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    def test_first_step_is_signed_lr(self):
        params = {"w": np.array([1.0, 1.0, 1.0])}
        opt = Adam(lr=0.01)
        opt.step(params, {"w": np.array([3.0, -0.2, 1e-3])})
        np.testing.assert_allclose(params["w"] - 1.0, [-0.01, 0.01, -0.01], rtol=1e-4)

    def test_quadratic_converges(self):
        params = {"x": np.array([3.0])}
        opt = Adam(lr=0.05)
        for step in range(500):
            opt.step(params, {"x": 2 * params["x"]})
            if abs(params["x"][0]) < 1e-3:
                break
        assert abs(params["x"][0]) < 1e-3
        assert opt.t <= 500

    def test_step_counter_increases(self):
        opt = Adam()
        params = {"w": np.zeros(1)}
        for k in range(1, 4):
            opt.step(params, {"w": np.ones(1)})
            assert opt.t == k

    def test_non_finite_gradient(self):
        params = {"w": np.zeros(2)}
        with pytest.raises(TrainingDivergenceError):
            Adam().step(params, {"w": np.array([np.nan, 0.0])})
        np.testing.assert_array_equal(params["w"], 0.0)

    def test_frozen_params_untouched(self):
        params = {"a": np.ones(3), "b": np.ones(3)}
        opt = Adam(lr=0.1)
        for _ in range(100):
            opt.step(params, {"a": np.ones(3), "b": np.ones(3)}, frozen={"b"})
        np.testing.assert_array_equal(params["b"], np.ones(3))
        assert "b" not in opt.m


class TestFiniteDifferences:
    def test_square(self):
        g = finite_diff_gradient(lambda v: float(v[0] ** 2), np.array([3.0]), 1e-5)
        assert g[0] == pytest.approx(6.0, abs=1e-4)

    def test_constant(self):
        np.testing.assert_array_equal(finite_diff_gradient(lambda v: 4.2, np.zeros(5)), np.zeros(5))


class TestRandomStream:
    def test_reproducible_first_million(self):
        a = RandomStream(123456789).random(10**6)
        b = RandomStream(123456789).random(10**6)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        assert not np.array_equal(RandomStream(1).random(8), RandomStream(2).random(8))

    def test_derive_is_stable_and_does_not_advance(self):
        s = RandomStream(5)
        before = s.state
        np.testing.assert_array_equal(s.derive(3).random(4), RandomStream(5).derive(3).random(4))
        assert s.state == before

    def test_seed_range(self):
        with pytest.raises(InvalidArgumentError):
            RandomStream(-1)
        RandomStream(2**64 - 1)

    @settings(max_examples=20)
    @given(st.integers(2, 50), st.integers(2, 50))
    def test_glorot_bounds(self, fan_in, fan_out):
        layer = Dense.init(RandomStream(0), fan_in, fan_out)
        limit = math.sqrt(6 / (fan_in + fan_out))
        assert layer.W.shape == (fan_out, fan_in)
        assert np.all(np.abs(layer.W) <= limit)
        assert not np.any(layer.b)
