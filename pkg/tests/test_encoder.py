import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqspeech import layers as L
from vqspeech.encoder import (
    DESK_LAYERS,
    DenseFeatures,
    EncoderConfig,
    encode_backward,
    encode_forward,
    encoder_forward,
    frame_rate,
    init_encoder,
    output_length,
    receptive_field,
    total_stride,
)
from vqspeech.errors import LengthError, ShapeError
from vqspeech.signal_io import Waveform


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


SMALL = EncoderConfig(layers=((3, 4, 2), (2, 3, 1)), activation="tanh")
PAPER_CFG = EncoderConfig.paper()
PAPER_PARAMS = init_encoder(PAPER_CFG, np.random.default_rng(0))


class TestGeometry:
    def test_paper_receptive_field(self):
        samples, ms = receptive_field(EncoderConfig.paper())
        assert samples == 465
        assert ms == pytest.approx(29.0625)
        assert abs(ms - 30) < 1.5

    def test_paper_stride_and_rate(self):
        cfg = EncoderConfig.paper()
        assert total_stride(cfg) == 160
        assert frame_rate(cfg) == 100.0

    def test_identity_geometry(self):
        cfg = EncoderConfig(layers=((4, 1, 1),))
        assert receptive_field(cfg)[0] == 1
        assert total_stride(cfg) == 1

    def test_paper_min_input_gives_one_frame(self):
        assert output_length(EncoderConfig.paper(), 465) == 1
        assert output_length(EncoderConfig.paper(), 464) < 1

    def test_extra_stride_halves_rate(self):
        base = EncoderConfig()
        halved = EncoderConfig(extra_stride=2)
        assert frame_rate(halved) == frame_rate(base) / 2
        assert len(halved.stack) == len(base.stack) + 1

    def test_desk_preset(self):
        cfg = EncoderConfig()
        assert cfg.layers == DESK_LAYERS
        assert total_stride(cfg) == 80
        assert cfg.dim == 64

    @pytest.mark.parametrize("layers", [(), ((4, 2, 3),), ((4, 0, 0),), ((0, 2, 1),)])
    def test_invalid_layers(self, layers):
        with pytest.raises(ShapeError):
            EncoderConfig(layers=layers)

    @pytest.mark.parametrize("kwargs", [{"activation": "swish"}, {"extra_stride": 3},
                                        {"init_gain": 0.0}, {"output_norm": "batch"}])
    def test_invalid_options(self, kwargs):
        with pytest.raises(ShapeError):
            EncoderConfig(**kwargs)

    @given(st.lists(st.tuples(st.integers(1, 6), st.integers(1, 3)), min_size=1, max_size=4))
    @settings(max_examples=50, deadline=None)
    def test_receptive_field_is_minimum_length(self, ks):
        layers = tuple((2, s + extra, s) for extra, s in ks)
        cfg = EncoderConfig(layers=layers)
        rf, _ = receptive_field(cfg)
        assert output_length(cfg, rf) == 1
        assert output_length(cfg, rf - 1) < 1


class TestForward:
    def test_zero_input_zero_bias(self):
        cfg = EncoderConfig(activation="relu")
        params = init_encoder(cfg, np.random.default_rng(0))
        for k in params:
            if k.endswith("bias"):
                params[k][:] = 0
        z = encode_forward(Waveform(np.zeros(800), 16000), params, cfg)
        assert np.all(z.values == 0)
        assert z.frame_rate == 200.0

    def test_impulse_returns_reversed_kernel(self):
        cfg = EncoderConfig(layers=((1, 5, 1),), activation="identity")
        w = np.array([[[1.0, 2.0, 3.0, 4.0, 5.0]]])
        params = {"layers.0.weight": w, "layers.0.bias": np.zeros(1)}
        x = np.zeros(9)
        x[4] = 1.0
        z = encode_forward(Waveform(x, 16000), params, cfg).values[:, 0]
        np.testing.assert_array_equal(z, [5.0, 4.0, 3.0, 2.0, 1.0])

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 11, 3))
        w = rng.normal(size=(4, 3, 3))
        b = rng.normal(size=4)
        y = L.conv1d(x, w, b, stride=2, dilation=2)
        tout = L.conv_out_length(11, 3, 2, 2)
        ref = np.zeros((2, tout, 4))
        for n in range(2):
            for t in range(tout):
                for o in range(4):
                    ref[n, t, o] = b[o] + sum(w[o, c, j] * x[n, 2 * t + 2 * j, c] for c in range(3) for j in range(3))
        np.testing.assert_allclose(y, ref, rtol=1e-12)

    def test_output_shape_and_determinism(self):
        cfg = EncoderConfig()
        params = init_encoder(cfg, np.random.default_rng(1))
        w = Waveform(np.random.default_rng(2).uniform(-0.5, 0.5, 4800), 16000)
        a = encode_forward(w, params, cfg)
        b = encode_forward(w, params, cfg)
        assert a.values.shape == (output_length(cfg, 4800), 64)
        np.testing.assert_array_equal(a.values, b.values)
        assert np.all(np.isfinite(a.values))

    def test_too_short_reports_minimum(self):
        cfg = EncoderConfig.paper()
        params = init_encoder(cfg, np.random.default_rng(0))
        with pytest.raises(LengthError) as info:
            encode_forward(Waveform(np.zeros(400), 16000), params, cfg)
        assert info.value.required == 465
        assert "465" in str(info.value)

    def test_init_gain_scales_weights_only(self):
        a = init_encoder(EncoderConfig(), np.random.default_rng(5))
        b = init_encoder(EncoderConfig(init_gain=3.0), np.random.default_rng(5))
        np.testing.assert_allclose(b["layers.0.weight"], 3.0 * a["layers.0.weight"])
        np.testing.assert_array_equal(b["layers.0.bias"], a["layers.0.bias"])

    def test_weight_bound(self):
        params = init_encoder(EncoderConfig(), np.random.default_rng(0))
        assert np.max(np.abs(params["layers.1.weight"])) <= 1 / np.sqrt(64 * 8)

    @pytest.mark.parametrize("norm,axis", [("frame", 2), ("time", 1)])
    def test_output_norm_standardizes(self, norm, axis):
        cfg = EncoderConfig(output_norm=norm)
        params = init_encoder(cfg, np.random.default_rng(0))
        x = np.random.default_rng(1).uniform(-0.5, 0.5, (2, 2000))
        z, _ = encoder_forward(x, params, cfg)
        np.testing.assert_allclose(z.mean(axis=axis), 0.0, atol=1e-10)
        assert np.all(z.std(axis=axis) <= 1.0 + 1e-9)

    @given(st.integers(465, 4000))
    @settings(max_examples=50, deadline=None)
    def test_length_recursion(self, n):
        t = n
        for _, kernel, stride in PAPER_CFG.layers:
            t = (t - kernel) // stride + 1
        assert output_length(PAPER_CFG, n) == t
        z, _ = encoder_forward(np.zeros((1, n)), PAPER_PARAMS, PAPER_CFG)
        assert z.shape[1] == t

    def test_shift_covariance(self):
        cfg = EncoderConfig()
        params = init_encoder(cfg, np.random.default_rng(0))
        x = np.random.default_rng(1).uniform(-0.5, 0.5, 3000)
        s = total_stride(cfg)
        a, _ = encoder_forward(x[None, s:], params, cfg)
        b, _ = encoder_forward(x[None, :], params, cfg)
        np.testing.assert_allclose(a[0], b[0, 1:1 + a.shape[1]], atol=1e-6)

    def test_dense_features_validation(self):
        with pytest.raises(ShapeError):
            DenseFeatures(np.zeros((0, 3)), 100.0)


class TestBackward:
    @pytest.mark.parametrize("norm", ["none", "frame", "time"])
    @pytest.mark.parametrize("activation", ["tanh", "gelu"])
    def test_finite_differences(self, norm, activation):
        cfg = EncoderConfig(layers=((3, 4, 2), (2, 3, 1)), activation=activation, output_norm=norm, init_gain=2.0)
        rng = np.random.default_rng(7)
        params = init_encoder(cfg, rng)
        x = rng.uniform(-1, 1, (2, 13))
        z, cache = encoder_forward(x, params, cfg)
        up = rng.normal(size=z.shape)
        grads, gx = encode_backward(up, cache, params, cfg)

        def loss():
            return float(np.sum(encoder_forward(x, params, cfg)[0] * up))

        for name, p in params.items():
            assert rel_err(grads[name], numeric_grad(loss, p)) < 1e-4, name
        assert rel_err(gx, numeric_grad(loss, x)) < 1e-4

    def test_last_bias_gradient_is_frame_count(self):
        cfg = EncoderConfig(layers=((3, 4, 2), (2, 3, 1)), activation="identity")
        params = init_encoder(cfg, np.random.default_rng(0))
        z, cache = encoder_forward(np.random.default_rng(1).normal(size=(1, 30)), params, cfg)
        grads, _ = encode_backward(np.ones_like(z), cache, params, cfg)
        np.testing.assert_allclose(grads["layers.1.bias"], np.full(2, z.shape[1]))

    def test_single_waveform_gradient_shape(self):
        params = init_encoder(SMALL, np.random.default_rng(0))
        w = Waveform(np.random.default_rng(1).uniform(-1, 1, 20), 16000)
        z, cache = encode_forward(w, params, SMALL, return_cache=True)
        grads, gx = encode_backward(np.ones_like(z.values), cache, params, SMALL)
        assert gx.shape == (20,)
        assert set(grads) == set(params)

    def test_shape_mismatch(self):
        params = init_encoder(SMALL, np.random.default_rng(0))
        _, cache = encoder_forward(np.zeros((1, 20)), params, SMALL)
        with pytest.raises(ShapeError):
            encode_backward(np.zeros((3, 2)), cache, params, SMALL)

    @given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2))
    @settings(max_examples=25, deadline=None)
    def test_conv_backward_is_adjoint(self, stride, dilation, left_pad):
        rng = np.random.default_rng(stride * 10 + dilation + 100 * left_pad)
        x = rng.normal(size=(2, 12, 2))
        w = rng.normal(size=(3, 2, 3))
        y = L.conv1d(x, w, np.zeros(3), stride, dilation, left_pad)
        g = rng.normal(size=y.shape)
        gx, gw, gb = L.conv1d_backward(g, x, w, stride, dilation, left_pad)
        # <conv(x), g> is linear in x and in w
        assert np.sum(y * g) == pytest.approx(np.sum(gx * x), rel=1e-10)
        assert np.sum(y * g) == pytest.approx(np.sum(gw * w), rel=1e-10)
        np.testing.assert_allclose(gb, g.sum(axis=(0, 1)))
