import math

import numpy as np
import pytest

from perimem.errors import ShapeError
from perimem.memory import covariance_loss, memory_covariance
from perimem.predictor import (
    PROB_CEIL,
    PROB_FLOOR,
    PredictorMlp,
    backward_batch,
    cross_entropy,
    cross_entropy_batch,
    forward_batch,
    l2_penalty,
    logit_grad,
    predict,
    total_loss,
)


def small_mlp(rng, input_dim=7, hidden=(5, 4)):
    return PredictorMlp.init(input_dim, rng, hidden=hidden)


def zero_mlp(input_dim, hidden=(5, 4)):
    h1, h2 = hidden
    return PredictorMlp(
        w1=np.zeros((h1, input_dim)), b1=np.zeros(h1),
        w2=np.zeros((h2, h1)), b2=np.zeros(h2),
        w3=np.zeros(h2), b3=np.zeros(1),
    )


def split_input(rng, total=7):
    """Random (representation, query, context, user_side) adding up to `total` dims."""
    parts = rng.uniform(-1, 1, total)
    return parts[:3], parts[3:5], parts[5:6], parts[6:]


class TestInit:
    def test_shapes(self, rng):
        mlp = PredictorMlp.init(10, rng, hidden=(6, 3))
        assert mlp.w1.shape == (6, 10)
        assert mlp.w2.shape == (3, 6)
        assert mlp.w3.shape == (3,)
        assert mlp.b3.shape == (1,)
        assert mlp.input_dim == 10

    def test_bad_widths_rejected(self, rng):
        with pytest.raises(ShapeError, match="input width"):
            PredictorMlp.init(0, rng)
        with pytest.raises(ShapeError, match="hidden widths"):
            PredictorMlp.init(4, rng, hidden=(0, 3))

    def test_deterministic_per_seed(self):
        a = PredictorMlp.init(5, np.random.default_rng(2), hidden=(4, 3))
        b = PredictorMlp.init(5, np.random.default_rng(2), hidden=(4, 3))
        for name, t in a.tensors().items():
            assert np.array_equal(t, b.tensors()[name])


class TestPredict:
    def test_zero_parameters_sit_on_the_fence(self, rng):
        mlp = zero_mlp(7)
        assert predict(mlp, *split_input(rng)) == 0.5

    def test_large_output_bias_saturates(self, rng):
        mlp = zero_mlp(7)
        mlp.b3[0] = 10.0
        assert abs(predict(mlp, *split_input(rng)) - 0.99995) < 1e-5

    def test_matches_layer_by_layer_oracle(self, rng):
        mlp = small_mlp(rng)
        rep, query, ctx, uside = split_input(rng)
        x = np.concatenate([rep, query, ctx, uside])
        a1 = np.maximum(mlp.w1 @ x + mlp.b1, 0.0)
        a2 = np.maximum(mlp.w2 @ a1 + mlp.b2, 0.0)
        expected = 1.0 / (1.0 + math.exp(-(float(mlp.w3 @ a2) + mlp.b3[0])))
        assert abs(predict(mlp, rep, query, ctx, uside) - expected) < 1e-12

    def test_width_mismatch_rejected(self, rng):
        mlp = small_mlp(rng, input_dim=7)
        with pytest.raises(ShapeError, match="assembled input width 8"):
            predict(mlp, np.zeros(4), np.zeros(2), np.zeros(1), np.zeros(1))

    def test_output_always_clamped(self, rng):
        mlp = zero_mlp(7)
        mlp.b3[0] = 500.0
        assert predict(mlp, *split_input(rng)) == PROB_CEIL
        mlp.b3[0] = -500.0
        assert predict(mlp, *split_input(rng)) == PROB_FLOOR


class TestForwardBatch:
    def test_matches_single_sample_predict(self, rng):
        mlp = small_mlp(rng)
        x = rng.uniform(-1, 1, (6, 7))
        probs, _ = forward_batch(mlp, x)
        for b in range(6):
            single = predict(mlp, x[b, :3], x[b, 3:5], x[b, 5:6], x[b, 6:])
            assert abs(probs[b] - single) < 1e-12

    def test_width_checked(self, rng):
        with pytest.raises(ShapeError, match="input width 6"):
            forward_batch(small_mlp(rng, input_dim=7), np.zeros((2, 6)))


class TestBackwardBatch:
    def test_matches_finite_differences(self, rng):
        mlp = small_mlp(rng, input_dim=5, hidden=(4, 3))
        x = rng.uniform(-1, 1, (6, 5))
        labels = rng.integers(0, 2, 6).astype(float)

        def loss():
            p, _ = forward_batch(mlp, x)
            return float(cross_entropy_batch(labels, p).sum())

        probs, cache = forward_batch(mlp, x)
        grads, d_x = backward_batch(mlp, cache, logit_grad(labels, cache[3]))

        h = 1e-6
        for name, tensor in mlp.tensors().items():
            fd = np.zeros_like(tensor)
            flat, out = tensor.reshape(-1), fd.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = loss()
                flat[i] = orig - h
                down = loss()
                flat[i] = orig
                out[i] = (up - down) / (2 * h)
            assert np.max(np.abs(grads[name] - fd)) < 1e-6, name

        fd_x = np.zeros_like(x)
        flat, out = x.reshape(-1), fd_x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss()
            flat[i] = orig - h
            down = loss()
            flat[i] = orig
            out[i] = (up - down) / (2 * h)
        assert np.max(np.abs(d_x - fd_x)) < 1e-6

    def test_small_gradient_step_reduces_loss(self, rng):
        mlp = small_mlp(rng)
        x = rng.uniform(-1, 1, (8, 7))
        labels = rng.integers(0, 2, 8).astype(float)
        probs, cache = forward_batch(mlp, x)
        before = float(cross_entropy_batch(labels, probs).sum())
        grads, _ = backward_batch(mlp, cache, logit_grad(labels, cache[3]))
        for name, tensor in mlp.tensors().items():
            tensor -= 1e-2 * grads[name]
        after = float(cross_entropy_batch(labels, forward_batch(mlp, x)[0]).sum())
        assert after < before


class TestLogitGrad:
    def test_interior_is_p_minus_y(self):
        g = logit_grad(np.array([1.0, 0.0]), np.array([0.3, 0.3]))
        assert np.allclose(g, [-0.7, 0.3], rtol=0, atol=1e-15)

    def test_saturated_output_freezes_gradient(self):
        # sigmoid(±40) rounds to exactly 1.0 / 0.0 in float64, outside the clamp
        assert logit_grad(np.array([0.0]), np.array([1.0]))[0] == 0.0
        assert logit_grad(np.array([1.0]), np.array([0.0]))[0] == 0.0


class TestCrossEntropy:
    def test_coin_flip(self):
        assert abs(cross_entropy(1, 0.5) - 0.693147) < 1e-6

    def test_confident_correct(self):
        assert abs(cross_entropy(1, 0.9) - 0.105361) < 1e-6

    def test_tiny_probability_on_negative_label(self):
        p = 1e-9
        assert abs(cross_entropy(0, p) - p) / p < 1e-6

    def test_validation(self):
        with pytest.raises(ValueError, match="label"):
            cross_entropy(0.5, 0.5)
        for bad in (0.0, 1.0, -0.1, 1.2):
            with pytest.raises(ValueError, match="strictly"):
                cross_entropy(1, bad)

    def test_batch_matches_scalar(self, rng):
        labels = rng.integers(0, 2, 20).astype(float)
        probs = rng.uniform(0.01, 0.99, 20)
        batch = cross_entropy_batch(labels, probs)
        for i in range(20):
            assert abs(batch[i] - cross_entropy(labels[i], probs[i])) < 1e-15


class TestTotalLoss:
    def test_without_penalties_it_is_the_sum(self, rng):
        ce = rng.uniform(0.1, 2.0, 5)
        assert total_loss(ce, np.zeros(5), [], 0.0, 0.0) == float(ce.sum())

    def test_redundant_pool_example(self):
        # Two perfectly anti-correlated slots carry a unit covariance penalty.
        pool = np.array([[1.0, -1.0], [-1.0, 1.0]])
        cov = covariance_loss(memory_covariance(pool))
        assert cov == 1.0
        assert total_loss([0.5], [cov], [], 1.0, 0.0) == 1.5

    def test_weight_decay_example(self):
        assert total_loss([0.0], [], [np.array([3.0])], 0.0, 2.0) == 9.0

    def test_covariance_term_uses_batch_mean(self):
        got = total_loss([0.0, 0.0], [1.0, 3.0], [], 0.5, 0.0)
        assert abs(got - 1.0) < 1e-15

    def test_empty_batch_rejected(self):
        with pytest.raises(ShapeError, match="empty"):
            total_loss([], [], [], 0.0, 0.0)


class TestL2Penalty:
    def test_matches_explicit_sum(self, rng):
        tensors = [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, 5)]
        expected = sum(float((t ** 2).sum()) for t in tensors)
        assert abs(l2_penalty(tensors) - expected) < 1e-12

    def test_empty_iterable(self):
        assert l2_penalty([]) == 0.0
