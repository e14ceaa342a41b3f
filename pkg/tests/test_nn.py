import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import central_difference, conv_bruteforce, maxpool_bruteforce, toy_model
from cnn_auralise.nn import (
    ConvLayer,
    ModelFileError,
    ShapeError,
    SwitchError,
    SwitchRecord,
    TrainConfig,
    TrainingDivergedError,
    build_model,
    conv2d_same,
    cross_entropy,
    evaluate,
    forward,
    load_model,
    loss_and_grads,
    maxpool2x2,
    predict,
    prepare_input,
    save_model,
    train,
    transpose_conv,
    unpool,
)


def _layer(rng, c_out, c_in, dtype=np.float64):
    return ConvLayer(rng.standard_normal((c_out, c_in, 3, 3)).astype(dtype), rng.standard_normal(c_out).astype(dtype))


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


class TestConvolution:
    @pytest.mark.parametrize("c_in,c_out,h,w", [(1, 3, 5, 7), (2, 4, 6, 6), (9, 2, 4, 9), (16, 3, 3, 5)])
    def test_matches_bruteforce(self, c_in, c_out, h, w):
        rng = np.random.default_rng(c_in * 100 + c_out)
        layer = _layer(rng, c_out, c_in)
        x = rng.standard_normal((c_in, h, w))
        np.testing.assert_allclose(conv2d_same(x, layer), conv_bruteforce(x, layer.weights, layer.bias), atol=1e-12)

    def test_batched_equals_per_item(self):
        rng = np.random.default_rng(1)
        layer = _layer(rng, 3, 2)
        x = rng.standard_normal((4, 2, 6, 5))
        batched = conv2d_same(x, layer)
        for i in range(4):
            np.testing.assert_allclose(batched[i], conv2d_same(x[i], layer), atol=1e-12)

    def test_adjoint_identity(self):
        """<conv(x), y> == <x, transpose_conv(y)> for the bias-free operator."""
        rng = np.random.default_rng(2)
        for _ in range(100):
            c_in, c_out = rng.integers(1, 6, size=2)
            h, w = rng.integers(2, 12, size=2)
            layer = _layer(rng, c_out, c_in)
            layer.bias[:] = 0
            x = rng.standard_normal((c_in, h, w))
            y = rng.standard_normal((c_out, h, w))
            lhs = np.sum(conv2d_same(x, layer) * y)
            rhs = np.sum(x * transpose_conv(y, layer))
            assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))

    def test_channel_mismatch(self):
        layer = _layer(np.random.default_rng(0), 2, 3)
        with pytest.raises(ShapeError):
            conv2d_same(np.zeros((2, 4, 4)), layer)
        with pytest.raises(ShapeError):
            transpose_conv(np.zeros((3, 4, 4)), layer)

    def test_bad_kernel_shape(self):
        with pytest.raises(ShapeError):
            ConvLayer(np.zeros((2, 1, 5, 5)), np.zeros(2))
        with pytest.raises(ShapeError):
            ConvLayer(np.zeros((2, 1, 3, 3)), np.zeros(3))


# ---------------------------------------------------------------------------
# Pooling and switches
# ---------------------------------------------------------------------------


class TestPooling:
    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31), c=st.integers(1, 4), h=st.integers(2, 11), w=st.integers(2, 11))
    def test_matches_bruteforce(self, seed, c, h, w):
        # coarse integer values force plenty of ties
        x = np.random.default_rng(seed).integers(-2, 3, size=(c, h, w)).astype(np.float64)
        pooled, switches = maxpool2x2(x)
        ref_vals, ref_offs = maxpool_bruteforce(x)
        np.testing.assert_array_equal(pooled, ref_vals)
        np.testing.assert_array_equal(switches.offsets, ref_offs)
        assert switches.input_hw == (h, w)

    def test_first_maximum_wins_ties(self):
        _, s = maxpool2x2(np.ones((1, 2, 2)))
        assert s.offsets[0, 0, 0] == 0
        _, s = maxpool2x2(np.array([[[0.0, 1.0], [1.0, 1.0]]]))
        assert s.offsets[0, 0, 0] == 1

    def test_odd_edges_dropped(self):
        pooled, s = maxpool2x2(np.arange(15.0).reshape(1, 3, 5))
        assert pooled.shape == (1, 1, 2)
        assert unpool(pooled, s).shape == (1, 3, 5)

    def test_unpool_right_inverse(self):
        """pool(unpool(p, s)) recovers p exactly for non-negative maps."""
        rng = np.random.default_rng(0)
        for _ in range(100):
            c, h, w = rng.integers(1, 5), rng.integers(2, 13), rng.integers(2, 13)
            x = np.maximum(rng.standard_normal((c, h, w)), 0)
            pooled, switches = maxpool2x2(x)
            again, _ = maxpool2x2(unpool(pooled, switches))
            np.testing.assert_array_equal(again, pooled)

    def test_unpool_places_values_at_switches(self):
        x = np.random.default_rng(5).standard_normal((2, 6, 4))
        pooled, s = maxpool2x2(x)
        up = unpool(pooled, s)
        rows, cols = s.coordinates()
        for ch in range(2):
            np.testing.assert_array_equal(up[ch][rows[ch], cols[ch]], pooled[ch])
        assert np.count_nonzero(up) == pooled.size

    def test_unpool_rejects_bad_switches(self):
        pooled, s = maxpool2x2(np.zeros((1, 4, 4)))
        with pytest.raises(SwitchError):
            unpool(np.zeros((1, 3, 2)), s)
        with pytest.raises(SwitchError):
            unpool(pooled, SwitchRecord(np.full((1, 2, 2), 4, dtype=np.int8), (4, 4)))
        with pytest.raises(SwitchError):
            unpool(pooled, s, target_shape=(8, 8))


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


class TestForward:
    def test_full_size_shapes(self):
        model = build_model(seed=0)
        trace = forward(model, np.random.default_rng(0).random((257, 171)).astype(np.float32))
        shapes = [p.shape[1:] for p in trace.pooled]
        assert shapes == [(64, 128, 85), (64, 64, 42), (64, 32, 21), (64, 16, 10), (64, 8, 5)]
        assert trace.flat.shape == (1, 2560)
        assert trace.probs.shape == (1, 3)
        assert trace.probs.sum() == pytest.approx(1.0)
        assert model.dtype == np.float32

    def test_wrong_input_shape(self):
        with pytest.raises(ShapeError):
            forward(toy_model(), np.zeros((1, 10, 12)))

    def test_infer_is_deterministic_and_train_needs_rng(self):
        model = toy_model()
        x = np.random.default_rng(1).random((1, 12, 12))
        np.testing.assert_array_equal(forward(model, x).logits, forward(model, x).logits)
        with pytest.raises(ValueError):
            forward(model, x, mode="train")
        with pytest.raises(ValueError):
            forward(model, x, mode="eval")

    def test_dropout_masks_are_inverted(self):
        model = toy_model()
        trace = forward(model, np.ones((1, 12, 12)), mode="train", rng=np.random.default_rng(0))
        values = np.unique(np.concatenate([m.ravel() for m in trace.dropout_masks]))
        np.testing.assert_array_equal(values, [0.0, 2.0])
        assert trace.hidden_mask is not None

    def test_prepare_input(self):
        np.testing.assert_allclose(prepare_input(np.array([[1.0, 4.0]])), [[0.25, 1.0]])
        np.testing.assert_array_equal(prepare_input(np.zeros((2, 2))), np.zeros((2, 2)))

    def test_model_validation(self):
        model = toy_model()
        with pytest.raises(ShapeError):
            type(model)(model.conv_layers, model.dense_layers, input_shape=(1, 16, 16))
        with pytest.raises(ShapeError):
            type(model)(model.conv_layers[::-1], model.dense_layers, input_shape=(1, 12, 12))


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def _relative_error(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


class TestGradients:
    def test_finite_difference_all_parameters(self):
        model = toy_model(input_hw=(12, 12), n_conv=2, channels=4, hidden=8, seed=3)
        rng = np.random.default_rng(4)
        x = rng.random((3, 1, 12, 12))
        labels = np.array([0, 2, 1])
        _, grads, _ = loss_and_grads(model, x, labels)
        worst = 0.0
        for param, grad in zip(model.parameters(), grads):

            def loss_at(value, param=param):
                saved = param.copy()
                param[...] = value
                out = cross_entropy(forward(model, x).probs, labels)
                param[...] = saved
                return out

            numeric = central_difference(loss_at, param)
            worst = max(worst, _relative_error(grad, numeric))
        assert worst < 1e-3

    def test_gradient_with_dropout_uses_same_masks(self):
        model = toy_model(seed=5)
        x = np.random.default_rng(6).random((2, 1, 12, 12))
        labels = np.array([1, 0])
        _, grads, trace = loss_and_grads(model, x, labels, mode="train", rng=np.random.default_rng(7))
        w = model.dense_layers[1].weights

        def loss_at(value):
            saved = w.copy()
            w[...] = value
            again = forward(model, x, mode="train", rng=np.random.default_rng(7))
            w[...] = saved
            return cross_entropy(again.probs, labels)

        np.testing.assert_allclose(grads[-2], central_difference(loss_at, w), rtol=1e-5, atol=1e-8)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _separable(n_per_class=24, seed=0):
    """Three classes of 16x16 images: energy in the top rows, bottom rows or left columns."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for i in range(3 * n_per_class):
        label = i % 3
        img = 0.1 * rng.random((16, 16))
        if label == 0:
            img[:5] += 1.0
        elif label == 1:
            img[-5:] += 1.0
        else:
            img[:, :5] += 1.0
        xs.append(prepare_input(img, np.float64)[None])
        ys.append(label)
    return np.stack(xs), np.array(ys)


class TestTraining:
    def test_separable_toy_reaches_095(self):
        x, y = _separable()
        model = toy_model(input_hw=(16, 16), n_conv=2, channels=8, hidden=32, seed=0)
        trained, history = train(model, (x, y), TrainConfig(epochs=20, seed=0))
        assert max(h["train_acc"] for h in history) >= 0.95
        _, acc = evaluate(trained, (x, y))
        assert acc >= 0.95

    def test_deterministic_given_seed(self):
        x, y = _separable(6)
        model = toy_model(input_hw=(16, 16), seed=1)
        a, ha = train(model, (x, y), TrainConfig(epochs=2, seed=3))
        b, hb = train(model, (x, y), TrainConfig(epochs=2, seed=3))
        assert ha == hb
        for p, q in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(p, q)

    def test_input_model_untouched(self):
        x, y = _separable(3)
        model = toy_model(input_hw=(16, 16), seed=1)
        before = [p.copy() for p in model.parameters()]
        train(model, (x, y), TrainConfig(epochs=1))
        for p, q in zip(before, model.parameters()):
            np.testing.assert_array_equal(p, q)

    def test_history_fields_and_validation(self):
        x, y = _separable(3)
        _, history = train(toy_model(input_hw=(16, 16)), (x, y), TrainConfig(epochs=2), validation=(x, y))
        assert [h["epoch"] for h in history] == [1, 2]
        assert set(history[0]) == {"epoch", "train_loss", "train_acc", "val_loss", "val_acc"}

    def test_target_accuracy_stops_early(self):
        x, y = _separable()
        _, history = train(
            toy_model(input_hw=(16, 16)), (x, y), TrainConfig(epochs=20, target_val_acc=0.0), validation=(x, y)
        )
        assert len(history) == 1

    def test_keep_best_returns_best_epoch(self):
        x, y = _separable(6)
        model, history = train(
            toy_model(input_hw=(16, 16)), (x, y), TrainConfig(epochs=4, keep_best=True), validation=(x, y)
        )
        best = max(h["val_acc"] for h in history)
        assert evaluate(model, (x, y))[1] == pytest.approx(best)

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train(toy_model(), (np.zeros((0, 1, 12, 12)), np.zeros(0, dtype=int)))

    def test_bad_labels(self):
        with pytest.raises(ValueError):
            train(toy_model(), (np.zeros((2, 1, 12, 12)), np.array([0, 3])))

    def test_divergence_names_epoch(self):
        x, y = _separable(3)
        with pytest.raises(TrainingDivergedError, match="epoch 1"):
            train(toy_model(input_hw=(16, 16)), (x * 1e200, y), TrainConfig(lr=1e200, epochs=3))

    def test_predict_batches(self):
        x, _ = _separable(3)
        model = toy_model(input_hw=(16, 16))
        probs = predict(model, x, batch=4)
        assert probs.shape == (9, 3)
        np.testing.assert_allclose(probs, forward(model, x).probs, atol=1e-12)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


class TestPersistence:
    def test_round_trip(self, tmp_path):
        model = toy_model(dtype=np.float32, seed=2)
        save_model(model, tmp_path / "m.json")
        loaded = load_model(tmp_path / "m.json")
        assert loaded.input_shape == model.input_shape
        assert loaded.class_names == model.class_names
        for p, q in zip(model.parameters(), loaded.parameters()):
            np.testing.assert_array_equal(p, q)

    def test_byte_identical(self, tmp_path):
        model = toy_model(dtype=np.float32)
        save_model(model, tmp_path / "a.json")
        save_model(model, tmp_path / "b.json")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
        manifest = json.loads((tmp_path / "a.json").read_text())
        assert manifest["blob"] == "a.bin"

    def test_truncated_blob(self, tmp_path):
        save_model(toy_model(dtype=np.float32), tmp_path / "m.json")
        blob = tmp_path / "m.bin"
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(ModelFileError):
            load_model(tmp_path / "m.json")

    def test_missing_and_corrupt_manifest(self, tmp_path):
        with pytest.raises(ModelFileError):
            load_model(tmp_path / "absent.json")
        (tmp_path / "bad.json").write_text("{not json")
        with pytest.raises(ModelFileError):
            load_model(tmp_path / "bad.json")

    def test_refuses_non_finite(self, tmp_path):
        model = toy_model(dtype=np.float32)
        model.dense_layers[0].bias[0] = np.nan
        with pytest.raises(ValueError):
            save_model(model, tmp_path / "m.json")
