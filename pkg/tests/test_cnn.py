import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import exhaustive_threshold, random_tiny_cnn, separable_set, worst_relative_gradient_error
from qrmcnn.cnn import (
    PROB_CLAMP,
    CnnConfig,
    DivergenceDetected,
    ShapeMismatch,
    _forward,
    forward,
    forward_batch,
    init,
    load_model,
    loss,
    loss_and_grad,
    predict,
    predict_batch,
    reflect_pad,
    save_model,
    train,
    tune_threshold,
    tune_threshold_scores,
)


def zero_model(config=None):
    model = init(config or CnnConfig())
    for p in model.parameters():
        p[...] = 0.0
    return model


class TestInit:
    def test_deterministic(self):
        a, b = init(CnnConfig(seed=3)), init(CnnConfig(seed=3))
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.parameters(), b.parameters()))

    def test_seed_changes_weights(self):
        a, b = init(CnnConfig(), seed=1), init(CnnConfig(), seed=2)
        assert any(x.tobytes() != y.tobytes() for x, y in zip(a.parameters(), b.parameters()))

    @pytest.mark.parametrize("variant,layers", [("approach_1_1", 5), ("approach_1_0", 6)])
    def test_layer_count(self, variant, layers):
        model = init(CnnConfig.for_variant(variant))
        assert len(model.weights) == layers
        assert model.weights[0].shape == (8, 1, 3)
        assert model.head_weight.shape == (8,)

    def test_uniform_scale(self):
        model = init(CnnConfig(channels=(64, 64)))
        w = model.weights[1]
        fan_in = 64 * 3
        assert np.max(np.abs(w)) <= math.sqrt(3 / fan_in)
        assert abs(w.std() - math.sqrt(1 / fan_in)) < 0.05 * math.sqrt(1 / fan_in)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            init(CnnConfig(kernel_width=4))
        with pytest.raises(ValueError):
            CnnConfig.for_variant("approach_2")


class TestForward:
    def test_zero_model(self):
        assert forward(zero_model(), np.zeros(13)) == 0.5

    def test_hand_computed_chain(self):
        model = init(CnnConfig(channels=(1,)))
        model.weights[0][0, 0] = [0.3, -0.2, 0.5]
        model.biases[0][:] = 0.1
        model.head_weight[:] = 2.0
        model.head_bias[:] = -0.3
        x = np.zeros(13)
        x[0] = 1.0
        # padded input [0, 1, 0, ..., 0]; conv gives -0.1 at 0, 0.4 at 1, 0.1 elsewhere
        expected = 1 / (1 + math.exp(-(2.0 * 0.4 - 0.3)))
        assert forward(model, x) == pytest.approx(expected, abs=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, 13, elements=st.floats(-1e6, 1e6)))
    def test_output_in_open_interval(self, x):
        p = forward(init(CnnConfig(seed=5)), x)
        assert 0.0 < p < 1.0

    def test_extreme_logit_still_open(self):
        model = init(CnnConfig(seed=1))
        model.head_bias[:] = 1e4
        assert 0 < forward(model, np.zeros(13)) < 1
        model.head_bias[:] = -1e4
        assert 0 < forward(model, np.zeros(13)) < 1

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            forward(init(CnnConfig()), np.zeros(12))
        with pytest.raises(ShapeMismatch):
            forward_batch(init(CnnConfig()), np.zeros((4, 14)))

    @pytest.mark.parametrize("variant", ["approach_1_0", "approach_1_1"])
    def test_length_preserved(self, variant):
        model = init(CnnConfig.for_variant(variant))
        _, cache, _, _ = _forward(model, np.random.default_rng(0).standard_normal((4, 13)))
        assert [z.shape[1] for _, _, z in cache] == [13] * len(model.weights)

    def test_reflect_padding_index_oracle(self):
        x = np.arange(13.0) * 1.5 + 2.0
        padded = reflect_pad(x[None, :, None], 1)[0, :, 0]
        expected = [x[1]] + list(x) + [x[len(x) - 2]]
        np.testing.assert_array_equal(padded, expected)

    def test_batch_matches_single(self):
        model = init(CnnConfig(seed=4))
        X = np.random.default_rng(1).standard_normal((6, 13))
        np.testing.assert_allclose(forward_batch(model, X), [forward(model, x) for x in X], rtol=1e-14)


class TestLoss:
    def test_half_everywhere(self):
        assert loss(zero_model(), np.zeros((5, 13)), [0, 1, 1, 0, 1]) == pytest.approx(math.log(2))

    def test_clamped_perfect(self):
        model = zero_model()
        model.head_bias[:] = 100.0
        value = loss(model, np.zeros((3, 13)), [1, 1, 1])
        assert value == pytest.approx(-math.log(1 - PROB_CLAMP))
        assert value < 1e-6

    def test_hand_batch(self):
        model = zero_model(CnnConfig(channels=(1,)))
        X = np.zeros((3, 13))
        X[:, 1] = [0.0, 1.0, -1.0]  # interior max after identity conv
        model.weights[0][0, 0] = [0.0, 1.0, 0.0]
        model.head_weight[:] = 1.0
        p = np.array([0.5, 1 / (1 + math.exp(-1.0)), 0.5])  # third row pools the zeros
        y = np.array([1, 0, 1])
        expected = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
        assert loss(model, X, y) == pytest.approx(expected, rel=1e-14)


class TestBackward:
    @pytest.mark.parametrize("seed", range(10))
    def test_finite_differences(self, seed):
        model, X, y = random_tiny_cnn(np.random.default_rng(seed))
        assert worst_relative_gradient_error(model, X, y) <= 1e-4

    def test_default_architecture(self):
        rng = np.random.default_rng(99)
        model = init(CnnConfig(channels=(3, 3, 3, 3, 3), seed=2))
        for b in model.biases:
            b[:] = rng.normal(0, 0.2, b.shape)
        X = rng.standard_normal((3, 13))
        y = np.array([1.0, 0.0, 1.0])
        assert worst_relative_gradient_error(model, X, y) <= 1e-4

    def test_clamp_plateau_is_finite(self):
        model = init(CnnConfig(seed=1))
        model.head_bias[:] = 60.0
        value, grads = loss_and_grad(model, np.zeros((2, 13)), [1, 1])
        assert np.isfinite(value)
        assert all(np.all(np.isfinite(g)) for g in grads)
        assert all(not g.any() for g in grads)

    def test_duplicate_is_mean(self):
        model, X, y = random_tiny_cnn(np.random.default_rng(3))
        _, single = loss_and_grad(model, X[:1], y[:1])
        _, double = loss_and_grad(model, np.vstack([X[:1], X[:1]]), np.r_[y[:1], y[:1]])
        for a, b in zip(single, double):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)

    def test_gradient_structure(self):
        model = init(CnnConfig())
        _, grads = loss_and_grad(model, np.zeros((2, 13)), [0, 1])
        assert [g.shape for g in grads] == [p.shape for p in model.parameters()]


class TestTrain:
    def test_separable(self):
        X, y = separable_set()
        model, trace = train(init(CnnConfig(seed=0)), X, y, epochs=200)
        acc = (predict_batch(model, X, 0.5) == y).mean()
        assert acc >= 0.95
        assert len(trace.train_loss) == 200

    def test_zero_epochs(self):
        model = init(CnnConfig(seed=2))
        out, trace = train(model, *separable_set(20), epochs=0)
        assert trace.train_loss == [] and trace.validation_loss == []
        assert all(a.tobytes() == b.tobytes() for a, b in zip(model.parameters(), out.parameters()))

    def test_input_model_untouched(self):
        model = init(CnnConfig(seed=2))
        before = [p.copy() for p in model.parameters()]
        train(model, *separable_set(20), epochs=3)
        assert all(np.array_equal(a, b) for a, b in zip(before, model.parameters()))

    def test_deterministic(self):
        X, y = separable_set(100)
        a, ta = train(init(CnnConfig(seed=7)), X, y, X, y, epochs=10)
        b, tb = train(init(CnnConfig(seed=7)), X, y, X, y, epochs=10)
        assert ta.train_loss == tb.train_loss and ta.validation_loss == tb.validation_loss
        assert all(p.tobytes() == q.tobytes() for p, q in zip(a.parameters(), b.parameters()))
        assert len(ta.validation_loss) == 10

    def test_divergence(self):
        X, y = separable_set(50)
        with pytest.raises(DivergenceDetected):
            train(init(CnnConfig(seed=0)), X, y, epochs=5, learning_rate=1e305)

    def test_loss_settles(self):
        X, y = separable_set(300, seed=4)
        _, trace = train(init(CnnConfig(seed=1)), X, y, epochs=100)
        losses = np.array(trace.train_loss)
        assert np.all(np.isfinite(losses))
        assert np.var(losses[-10:]) < np.var(losses[:10])


class TestThreshold:
    def test_all_high_positive(self):
        assert tune_threshold_scores([0.9] * 10, [1] * 10) == 0.5

    def test_four_examples(self):
        probs, labels = [0.2, 0.35, 0.61, 0.8], [0, 0, 1, 1]
        assert tune_threshold_scores(probs, labels) == exhaustive_threshold(probs, labels) == 0.5
        probs, labels = [0.1, 0.62, 0.64, 0.9], [0, 0, 1, 1]
        assert tune_threshold_scores(probs, labels) == exhaustive_threshold(probs, labels) == 0.63

    @pytest.mark.parametrize("seed", range(10))
    def test_random_against_exhaustive(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 60))
        probs = np.round(rng.random(n), int(rng.integers(1, 4)))
        labels = rng.integers(0, 2, n)
        assert tune_threshold_scores(probs, labels) == exhaustive_threshold(probs.tolist(), labels.tolist())

    def test_on_model(self):
        model = init(CnnConfig(seed=3))
        X, y = separable_set(40)
        c = tune_threshold(model, X, y)
        assert c == exhaustive_threshold(forward_batch(model, X).tolist(), y.tolist())


class TestPredict:
    def test_boundary_inclusive(self):
        assert forward(zero_model(), np.ones(13)) == 0.5
        assert predict(zero_model(), np.ones(13), 0.5) == 1

    def test_high_threshold(self):
        model = init(CnnConfig(seed=1))
        x = np.random.default_rng(2).standard_normal(13)
        assert predict(model, x, 0.999999) == 0

    def test_agrees_with_forward(self):
        model = init(CnnConfig(seed=6))
        X = np.random.default_rng(7).standard_normal((1000, 13))
        c = 0.5
        preds = predict_batch(model, X, c)
        np.testing.assert_array_equal(preds, (forward_batch(model, X) >= c).astype(int))
        assert all(predict(model, x, c) == int(forward(model, x) >= c) for x in X)

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            predict(init(CnnConfig()), np.zeros(13), 1.0)


class TestPersistence:
    def test_round_trip_bit_identical(self):
        X, y = separable_set(50)
        model, _ = train(init(CnnConfig.for_variant("approach_1_0", seed=8)), X, y, epochs=5)
        buf = io.StringIO()
        save_model(model, buf)
        buf.seek(0)
        loaded = load_model(buf)
        assert loaded.config == model.config
        assert forward_batch(loaded, X).tobytes() == forward_batch(model, X).tobytes()
        again = io.StringIO()
        save_model(loaded, again)
        assert again.getvalue() == buf.getvalue()

    def test_rejects_foreign_document(self):
        with pytest.raises(ValueError):
            load_model(io.StringIO('{"format": "other", "version": 1}'))
