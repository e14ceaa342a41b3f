import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import central_difference, toy_model
from cnn_auralise.analysis import exact_receptive_field
from cnn_auralise.deconv import (
    DeconvRequest,
    InvalidRequest,
    MapFileError,
    deconv_feature,
    deconv_layer,
    masked_start,
    read_map_binary,
    read_map_csv,
    write_map_binary,
    write_map_csv,
)
from cnn_auralise.nn import build_model, forward


# ---------------------------------------------------------------------------
# Requests
# ---------------------------------------------------------------------------


class TestRequests:
    def test_label(self):
        assert DeconvRequest(3, 38).label == "layer3_feat38"

    @pytest.mark.parametrize("args", [(0, 1), (1, -1), (1, 0, 0), (1, 0, "some"), (1, 0, 1.5)])
    def test_invalid(self, args):
        with pytest.raises(InvalidRequest):
            DeconvRequest(*args)

    def test_out_of_range_for_model(self):
        model = toy_model()
        trace = forward(model, np.ones((1, 12, 12)))
        with pytest.raises(InvalidRequest):
            deconv_feature(model, trace, DeconvRequest(3, 0))
        with pytest.raises(InvalidRequest):
            deconv_feature(model, trace, DeconvRequest(1, 4))
        with pytest.raises(ValueError):  # InvalidRequest is a ValueError
            deconv_layer(model, trace, 1, [0, 9])

    def test_top_k_masking(self):
        model = toy_model(seed=1)
        trace = forward(model, np.random.default_rng(0).random((1, 12, 12)))
        start = masked_start(trace, DeconvRequest(2, 1, keep=2))
        fmap = trace.pooled[1][0, 1]
        assert np.count_nonzero(start[1]) <= 2
        assert np.count_nonzero(np.delete(start, 1, axis=0)) == 0
        if np.count_nonzero(start[1]):
            assert start[1].max() == fmap.max()


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


class TestProjection:
    @pytest.mark.parametrize("layer,feature", [(1, 0), (1, 3), (2, 2), (3, 1)])
    def test_linearised_equals_input_gradient(self, layer, feature):
        """Without ReLUs the deconvnet is the input gradient of half the summed squared feature.

        The projection starts from the activations themselves, so each unit's
        path is weighted by its own value a, which is d(a^2 / 2).
        """
        model = toy_model(input_hw=(16, 16), n_conv=3, channels=4, seed=layer * 10 + feature)
        x = np.random.default_rng(feature).random((1, 16, 16))

        def summed(v):
            return 0.5 * np.sum(forward(model, v, use_relu=False).pooled[layer - 1][0, feature] ** 2)

        trace = forward(model, x, use_relu=False)
        got = deconv_feature(model, trace, DeconvRequest(layer, feature), use_relu=False).values
        np.testing.assert_allclose(got, central_difference(summed, x)[0], atol=1e-4)

    def test_fast_path_matches_reference(self):
        model = build_model(input_shape=(1, 64, 48), n_conv=4, channels=6, hidden=8, seed=4)
        x = np.random.default_rng(1).random((1, 64, 48)).astype(np.float32)
        trace = forward(model, x)
        for layer in (1, 2, 4):
            fast = deconv_layer(model, trace, layer, chunk=4)
            assert fast.shape == (6, 64, 48)
            for f in range(6):
                ref = deconv_feature(model, trace, DeconvRequest(layer, f)).values
                scale = max(np.abs(ref).max(), 1e-12)
                np.testing.assert_allclose(fast[f], ref, atol=1e-5 * scale)

    def test_single_activation_support_within_receptive_field(self):
        """Top-1 map of a positive-weight net stays inside the conv receptive field.

        The extent depends on which pooling positions the switches picked, so
        only layer 1 is guaranteed to fill it; deeper layers can exceed
        3 * 2**(l - 1) pixels.
        """
        model = build_model(input_shape=(1, 128, 128), n_conv=4, channels=2, hidden=4, seed=0, dtype=np.float64)
        for layer in model.conv_layers:
            layer.weights[:] = np.abs(layer.weights) + 0.1
        x = np.random.default_rng(0).random((1, 128, 128)) + 0.5
        trace = forward(model, x)
        extents = []
        for l in range(1, 5):
            fmap = trace.pooled[l - 1][0, 0]
            # choose an interior unit and make it the unique strongest one
            i, j = fmap.shape[0] // 2, fmap.shape[1] // 2
            trace.pooled[l - 1][0, 0, i, j] = fmap.max() + 1.0
            values = deconv_feature(model, trace, DeconvRequest(l, 0, keep=1)).values
            rows, cols = np.nonzero(values)
            extents.append((rows.max() - rows.min() + 1, cols.max() - cols.min() + 1))
            assert max(extents[-1]) <= exact_receptive_field(l)
        assert extents[0] == (3, 3)
        assert any(max(e) > 3 * 2 ** (l - 1) for l, e in enumerate(extents, 1))

    def test_dead_feature_gives_zero_map(self):
        model = toy_model(input_hw=(16, 16), n_conv=2, seed=2, dtype=np.float32)
        model.conv_layers[0].weights[1] = 0
        model.conv_layers[0].bias[1] = -1.0
        trace = forward(model, np.random.default_rng(0).random((1, 16, 16)))
        values = deconv_feature(model, trace, DeconvRequest(1, 1)).values
        assert not values.any()
        assert not deconv_layer(model, trace, 1, [1]).any()

    def test_zero_input_zero_map(self):
        model = toy_model(input_hw=(16, 16), n_conv=2, dtype=np.float32)
        trace = forward(model, np.zeros((1, 16, 16)))
        # with zero biases nothing activates
        assert not deconv_layer(model, trace, 2).any()

    def test_batch_index(self):
        model = toy_model(input_hw=(16, 16), n_conv=2, dtype=np.float64)
        x = np.random.default_rng(3).random((2, 1, 16, 16))
        both = forward(model, x)
        second = forward(model, x[1])
        req = DeconvRequest(2, 1)
        np.testing.assert_allclose(
            deconv_feature(model, both, req, index=1).values, deconv_feature(model, second, req).values
        )


# ---------------------------------------------------------------------------
# Map files
# ---------------------------------------------------------------------------


class TestMapFiles:
    @settings(max_examples=20, deadline=None)
    @given(rows=st.integers(1, 20), cols=st.integers(1, 20), seed=st.integers(0, 2**31))
    def test_binary_round_trip(self, tmp_path_factory, rows, cols, seed):
        values = np.random.default_rng(seed).standard_normal((rows, cols)).astype(np.float32)
        path = tmp_path_factory.mktemp("maps") / "m.dmap"
        write_map_binary(path, values)
        np.testing.assert_array_equal(read_map_binary(path), values)
        assert path.stat().st_size == 16 + 4 * rows * cols

    def test_csv_round_trip(self, tmp_path):
        values = np.random.default_rng(0).standard_normal((5, 3)).astype(np.float32)
        write_map_csv(tmp_path / "m.csv", values)
        np.testing.assert_allclose(read_map_csv(tmp_path / "m.csv"), values, rtol=1e-7)

    def test_binary_rejects_corruption(self, tmp_path):
        path = tmp_path / "m.dmap"
        write_map_binary(path, np.zeros((2, 2)))
        raw = path.read_bytes()
        path.write_bytes(raw[:-1])
        with pytest.raises(MapFileError):
            read_map_binary(path)
        path.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(MapFileError):
            read_map_binary(path)
        path.write_bytes(b"DM")
        with pytest.raises(MapFileError):
            read_map_binary(path)

    def test_rejects_non_2d(self, tmp_path):
        with pytest.raises(ValueError):
            write_map_binary(tmp_path / "m.dmap", np.zeros(3))
