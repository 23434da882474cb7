import math

import numpy as np
import pytest

from pimnb import nn
from pimnb.errors import (
    CorruptedStateError,
    InsufficientBatchError,
    ShapeError,
    UnknownLayerError,
)
from pimnb.noise import NoiseSpec, instantiate_device
from pimnb.tensor import Tensor, tensor


def relu_only_model():
    return nn.Model([nn.ReLU(), nn.Flatten()], {}, {})


class TestLayerSpecs:
    def test_epsilon_positive(self):
        with pytest.raises(ValueError):
            nn.BatchNorm2d(4, epsilon=0.0)

    def test_conv_validation(self):
        with pytest.raises(ValueError):
            nn.Conv2d(0, 4, 3)

    def test_model_shape_validation(self):
        layers = [nn.Linear(4, 2)]
        with pytest.raises(ShapeError):
            nn.Model(layers, {0: {"weight": tensor(np.zeros((2, 5)))}}, {})

    def test_bias_iff_has_bias(self):
        layers = [nn.Linear(4, 2, has_bias=False)]
        params = {0: {"weight": tensor(np.zeros((2, 4))), "bias": tensor(np.zeros(2))}}
        with pytest.raises(ShapeError):
            nn.Model(layers, params, {})

    def test_bn_needs_stats(self):
        with pytest.raises(ShapeError):
            nn.Model([nn.BatchNorm2d(4)], {}, {})


class TestForwardBasics:
    def test_relu_example(self):
        model = nn.Model([nn.ReLU()], {}, {})
        x = Tensor(np.array([[[[-1.0, 2.0]]]], dtype=np.float32))
        out, _ = nn.forward(model, x, nn.ExecMode.EVAL)
        assert out.array.ravel().tolist() == [0.0, 2.0]

    def test_insufficient_batch_in_train(self):
        model = relu_only_model()
        x = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))
        with pytest.raises(InsufficientBatchError):
            nn.forward(model, x, nn.ExecMode.TRAIN)
        with pytest.raises(InsufficientBatchError):
            nn.forward(model, x, nn.ExecMode.CALIBRATE)

    def test_layer_indexed_shape_error(self):
        model = nn.reference_cnn(1, 3, seed=0)
        bad = Tensor(np.zeros((2, 3, 16, 16), dtype=np.float32))
        with pytest.raises(ShapeError, match="layer 0"):
            nn.forward(model, bad, nn.ExecMode.EVAL)

    def test_trace_shape_matches_untraced(self):
        model = nn.reference_cnn(1, 3, seed=0)
        x = Tensor(np.random.default_rng(0).normal(size=(2, 1, 16, 16)))
        _, acts = nn.forward(model, x, nn.ExecMode.EVAL, trace={0, 3, 11, 13})
        assert acts[0].shape == (2, 16, 16, 16)
        assert acts[3].shape == (2, 16, 8, 8)
        assert acts[11].shape == (2, 32, 1, 1)
        assert acts[13].shape == (2, 3)

    def test_unknown_trace_id(self):
        model = relu_only_model()
        x = Tensor(np.zeros((2, 1, 2, 2), dtype=np.float32))
        with pytest.raises(UnknownLayerError):
            nn.forward(model, x, nn.ExecMode.EVAL, trace={17})

    def test_eval_forward_deterministic(self):
        model = nn.reference_cnn(1, 3, seed=1)
        dev = instantiate_device(model, NoiseSpec("mul", 0.08, master_seed=6))
        x = Tensor(np.random.default_rng(1).normal(size=(4, 1, 16, 16)))
        a, _ = nn.forward(model, x, nn.ExecMode.EVAL, device=dev, batch_index=2)
        b, _ = nn.forward(model, x, nn.ExecMode.EVAL, device=dev, batch_index=2)
        assert np.array_equal(a.array, b.array)

    def test_batch_index_changes_noisy_output(self):
        model = nn.reference_cnn(1, 3, seed=1)
        dev = instantiate_device(model, NoiseSpec("mul", 0.08, master_seed=6))
        x = Tensor(np.random.default_rng(1).normal(size=(4, 1, 16, 16)))
        a, _ = nn.forward(model, x, nn.ExecMode.EVAL, device=dev, batch_index=0)
        b, _ = nn.forward(model, x, nn.ExecMode.EVAL, device=dev, batch_index=1)
        assert not np.array_equal(a.array, b.array)


class TestBatchNormForward:
    def test_eval_zero_numerator(self):
        stats = nn.BNStats(np.array([2.0]), np.array([1.0]), np.array([1.0]), np.array([0.0]))
        x = Tensor(np.full((1, 1, 1, 1), 2.0))
        out = nn.batchnorm_forward(x, stats, nn.ExecMode.EVAL)
        assert abs(out.array.ravel()[0]) <= 1e-5

    def test_train_hand_value(self):
        # batch values [1,2,3]: mean 2, biased var 2/3 -> [-1.2247, 0, 1.2247]
        stats = nn.BNStats.identity(1)
        x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1, 1))
        out = nn.batchnorm_forward(x, stats, nn.ExecMode.TRAIN)
        got = out.array.ravel()
        want = np.array([-1.2247, 0.0, 1.2247])
        assert np.max(np.abs(got - want)) <= 1e-3

    def test_gamma_zero_gives_constant_beta(self):
        stats = nn.BNStats(np.zeros(2), np.ones(2), np.zeros(2), np.array([0.5, -1.5]))
        x = Tensor(np.random.default_rng(0).normal(size=(3, 2, 4, 4)))
        for mode in (nn.ExecMode.EVAL, nn.ExecMode.TRAIN):
            out = nn.batchnorm_forward(x, stats, mode)
            assert np.allclose(out.array[:, 0], 0.5, atol=1e-6)
            assert np.allclose(out.array[:, 1], -1.5, atol=1e-6)

    def test_train_normalizes_to_unit_moments(self):
        stats = nn.BNStats.identity(3)
        g = np.random.default_rng(5)
        x = Tensor(2.5 * g.normal(size=(8, 3, 6, 6)) + 1.0)
        out = nn.batchnorm_forward(x, stats, nn.ExecMode.CALIBRATE)
        mean = out.array.mean(axis=(0, 2, 3))
        var = out.array.var(axis=(0, 2, 3))
        assert np.max(np.abs(mean)) <= 1e-4
        assert np.max(np.abs(var - 1.0)) <= 1e-3

    def test_eval_matches_scalar_reference(self):
        g = np.random.default_rng(6)
        c = 4
        stats = nn.BNStats(
            g.normal(size=c), g.uniform(0.5, 2.0, size=c), g.normal(1, 0.3, size=c), g.normal(size=c)
        )
        x = g.normal(size=(2, c, 3, 3)).astype(np.float32)
        out = nn.batchnorm_forward(Tensor(x), stats, nn.ExecMode.EVAL).array
        for n in range(2):
            for ch in range(c):
                for i in range(3):
                    for j in range(3):
                        xhat = (float(x[n, ch, i, j]) - float(stats.running_mean[ch])) / math.sqrt(
                            float(stats.running_var[ch]) + stats.epsilon
                        )
                        want = xhat * float(stats.gamma[ch]) + float(stats.beta[ch])
                        assert abs(out[n, ch, i, j] - want) <= 1e-5

    def test_train_updates_running_ema(self):
        stats = nn.BNStats.identity(1, momentum=0.9)
        x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1, 1))
        nn.batchnorm_forward(x, stats, nn.ExecMode.TRAIN)
        assert stats.running_mean[0] == pytest.approx(0.9 * 0.0 + 0.1 * 2.0, abs=1e-6)
        assert stats.running_var[0] == pytest.approx(0.9 * 1.0 + 0.1 * (2.0 / 3.0), abs=1e-6)

    def test_calibrate_leaves_running_untouched(self):
        stats = nn.BNStats.identity(1)
        x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1, 1))
        nn.batchnorm_forward(x, stats, nn.ExecMode.CALIBRATE)
        assert stats.running_mean[0] == 0.0
        assert stats.running_var[0] == 1.0

    def test_negative_running_var_raises(self):
        stats = nn.BNStats.identity(2)
        stats.running_var[1] = -0.5
        x = Tensor(np.zeros((2, 2, 2, 2), dtype=np.float32))
        with pytest.raises(CorruptedStateError):
            nn.batchnorm_forward(x, stats, nn.ExecMode.EVAL)

    def test_single_value_per_channel_rejected(self):
        stats = nn.BNStats.identity(1)
        x = Tensor(np.zeros((1, 1, 1, 1), dtype=np.float32))
        with pytest.raises(InsufficientBatchError):
            nn.batchnorm_forward(x, stats, nn.ExecMode.TRAIN)


def naive_conv(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for ni in range(n):
        for fi in range(f):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0 if b is None else float(b[fi])
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[ni, ci, oy * stride + i, ox * stride + j] * float(w[fi, ci, i, j])
                    out[ni, fi, oy, ox] = acc
    return out


def naive_forward(model: nn.Model, x: np.ndarray) -> np.ndarray:
    """Independent per-layer reimplementation (eval mode), float64."""
    h = x.astype(np.float64)
    for i, layer in enumerate(model.layers):
        if isinstance(layer, nn.Conv2d):
            p = model.params[i]
            b = p["bias"].array if layer.has_bias else None
            h = naive_conv(h, p["weight"].array, b, layer.stride, layer.padding)
        elif isinstance(layer, nn.Linear):
            p = model.params[i]
            h = h @ p["weight"].array.astype(np.float64).T
            if layer.has_bias:
                h = h + p["bias"].array
        elif isinstance(layer, nn.BatchNorm2d):
            s = model.bn_states[i]
            out = np.empty_like(h)
            for ch in range(layer.channels):
                xhat = (h[:, ch] - float(s.running_mean[ch])) / math.sqrt(
                    float(s.running_var[ch]) + s.epsilon
                )
                out[:, ch] = xhat * float(s.gamma[ch]) + float(s.beta[ch])
            h = out
        elif isinstance(layer, nn.ReLU):
            h = np.where(h > 0, h, 0.0)
        elif isinstance(layer, nn.MaxPool2d):
            n, c, hh, ww = h.shape
            oh = (hh - layer.kernel) // layer.stride + 1
            ow = (ww - layer.kernel) // layer.stride + 1
            out = np.zeros((n, c, oh, ow))
            for ni in range(n):
                for ci in range(c):
                    for oy in range(oh):
                        for ox in range(ow):
                            sy, sx = oy * layer.stride, ox * layer.stride
                            out[ni, ci, oy, ox] = h[ni, ci, sy : sy + layer.kernel, sx : sx + layer.kernel].max()
            h = out
        elif isinstance(layer, nn.GlobalAvgPool):
            h = h.mean(axis=(2, 3), keepdims=True)
        elif isinstance(layer, nn.Flatten):
            h = h.reshape(h.shape[0], -1)
    return h


class TestEngineAgainstNaiveOracle:
    @pytest.mark.parametrize("stride,padding", [(1, 1), (1, 0), (2, 1)])
    def test_conv_against_six_loop(self, stride, padding):
        g = np.random.default_rng(7)
        x = g.normal(size=(2, 3, 8, 8)).astype(np.float32)
        w = g.normal(size=(4, 3, 3, 3)).astype(np.float32)
        b = g.normal(size=4).astype(np.float32)
        got, _ = nn.conv2d_apply(x, w, b, stride, padding)
        want = naive_conv(x, w, b, stride, padding)
        assert np.max(np.abs(got - want)) <= 1e-4

    def test_full_cnn_against_naive_reimplementation(self):
        model = nn.reference_cnn(1, 10, seed=9)
        # give the BN layers non-trivial stats
        g = np.random.default_rng(10)
        for i in model.bn_layers():
            s = model.bn_states[i]
            s.running_mean = g.normal(0, 0.5, s.channels).astype(np.float32)
            s.running_var = g.uniform(0.5, 1.5, s.channels).astype(np.float32)
            s.gamma = g.normal(1, 0.2, s.channels).astype(np.float32)
            s.beta = g.normal(0, 0.2, s.channels).astype(np.float32)
        x = g.normal(size=(4, 1, 16, 16)).astype(np.float32)
        got, _ = nn.forward(model, Tensor(x), nn.ExecMode.EVAL)
        want = naive_forward(model, x)
        assert np.max(np.abs(got.array - want)) <= 1e-4


class TestModelHygiene:
    def test_copy_isolates_bn_state(self):
        model = nn.reference_cnn(1, 3, seed=0)
        clone = model.copy()
        i = model.bn_layers()[0]
        clone.bn_states[i].running_mean[0] = 123.0
        assert model.bn_states[i].running_mean[0] == 0.0

    def test_params_shared_between_copies(self):
        model = nn.reference_cnn(1, 3, seed=0)
        clone = model.copy()
        i = model.analog_layers()[0]
        assert clone.params[i]["weight"] is model.params[i]["weight"]

    def test_evaluate_counts(self, blob_splits, trained_model):
        _, _, test_d = blob_splits
        res = nn.evaluate(trained_model, test_d, batch_size=100)
        assert res.num_samples == len(test_d)
        assert res.correct == round(res.accuracy * res.num_samples)
