import numpy as np
import pytest

from pimnb import nn
from pimnb.errors import ShapeError
from pimnb.noise import (
    DeviceInstance,
    NoiseSpec,
    TemporalSample,
    instantiate_device,
    noisy_weight,
    sample_temporal,
    sample_temporal_for_layer,
)
from pimnb.tensor import Tensor, tensor


def small_model(sigma_s=0.1):
    return nn.reference_cnn(1, 3, seed=5)


class TestNoiseSpec:
    def test_defaults_match_strict_setting(self):
        spec = NoiseSpec("mul", 0.06)
        assert spec.sigma_t_ratio == 0.2
        assert spec.sigma_s == 0.1
        assert spec.sigma_t == pytest.approx(0.2 * 0.06)

    def test_kind_normalized(self):
        assert NoiseSpec("MUL", 0.1).kind == "mul"

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(kind="div", eta0=0.1),
            dict(kind="mul", eta0=-0.1),
            dict(kind="mul", eta0=0.1, sigma_s=-1),
            dict(kind="mul", eta0=0.1, sigma_t_ratio=-0.5),
            dict(kind="mul", eta0=0.1, master_seed=-1),
            dict(kind="mul", eta0=0.1, temporal_granularity="per_batch"),
        ],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            NoiseSpec(**kwargs)


class TestInstantiateDevice:
    def test_sigma_s_zero_gives_unit_masks(self):
        model = small_model()
        dev = instantiate_device(model, NoiseSpec("mul", 0.1, sigma_s=0.0, master_seed=3))
        for mask in dev.spatial_masks.values():
            assert np.all(mask.array == 1.0)

    def test_same_seed_bit_identical(self):
        model = small_model()
        spec = NoiseSpec("mul", 0.1, master_seed=11)
        d1 = instantiate_device(model, spec)
        d2 = instantiate_device(model, spec)
        assert d1.spatial_masks.keys() == d2.spatial_masks.keys()
        for k in d1.spatial_masks:
            assert np.array_equal(d1.spatial_masks[k].array, d2.spatial_masks[k].array)

    def test_different_seed_differs(self):
        model = small_model()
        d1 = instantiate_device(model, NoiseSpec("mul", 0.1, master_seed=1))
        d2 = instantiate_device(model, NoiseSpec("mul", 0.1, master_seed=2))
        k = next(iter(d1.spatial_masks))
        assert not np.array_equal(d1.spatial_masks[k].array, d2.spatial_masks[k].array)

    def test_one_mask_per_analog_layer_shape_matched(self):
        model = small_model()
        dev = instantiate_device(model, NoiseSpec("add", 0.01, master_seed=0))
        assert set(dev.spatial_masks) == set(model.analog_layers())
        for i, mask in dev.spatial_masks.items():
            assert mask.shape == model.params[i]["weight"].shape
        assert dev.bias_masks == {}

    def test_bias_masks_when_enabled(self):
        model = small_model()
        dev = instantiate_device(model, NoiseSpec("mul", 0.1, master_seed=0, noise_biases=True))
        assert set(dev.bias_masks) == set(model.analog_layers())

    def test_mask_moments_monte_carlo(self):
        # 1e5 draws from Normal(1, 0.1^2): mean within [0.999, 1.001],
        # std within [0.098, 0.102] (3-standard-error bounds).
        layers = [nn.Linear(500, 200, has_bias=False)]
        params = {0: {"weight": Tensor(np.zeros((200, 500), dtype=np.float32))}}
        model = nn.Model(layers, params, {})
        dev = instantiate_device(model, NoiseSpec("mul", 0.1, sigma_s=0.1, master_seed=123))
        vals = dev.spatial_masks[0].array.ravel().astype(np.float64)
        assert vals.size == 100000
        assert 0.999 <= vals.mean() <= 1.001
        assert 0.098 <= vals.std() <= 0.102


class TestSampleTemporal:
    def test_eta0_zero_exact(self):
        model = small_model()
        dev = instantiate_device(model, NoiseSpec("mul", 0.0, master_seed=9))
        for bi in range(5):
            assert sample_temporal(dev, bi).value == 0.0

    def test_degenerate_ratio_exact(self):
        model = small_model()
        dev = instantiate_device(model, NoiseSpec("mul", 0.06, sigma_t_ratio=0.0, master_seed=9))
        assert sample_temporal(dev, 0).value == 0.06

    def test_deterministic_per_batch_index(self):
        model = small_model()
        dev = instantiate_device(model, NoiseSpec("mul", 0.1, master_seed=21))
        a = sample_temporal(dev, 7)
        b = sample_temporal(dev, 7)
        assert a.value == b.value and a.batch_index == 7

    def test_varies_across_batches(self):
        model = small_model()
        dev = instantiate_device(model, NoiseSpec("mul", 0.1, master_seed=21))
        vals = {sample_temporal(dev, bi).value for bi in range(10)}
        assert len(vals) == 10

    def test_per_layer_streams_differ(self):
        model = small_model()
        dev = instantiate_device(
            model, NoiseSpec("mul", 0.1, master_seed=2, temporal_granularity="per_layer")
        )
        v0 = sample_temporal_for_layer(dev, 0, 0).value
        v4 = sample_temporal_for_layer(dev, 0, 4).value
        assert v0 != v4

    def test_negative_batch_index(self):
        model = small_model()
        dev = instantiate_device(model, NoiseSpec("mul", 0.1))
        with pytest.raises(ValueError):
            sample_temporal(dev, -1)

    def test_temporal_moments_monte_carlo(self):
        # 1e5 draws from Normal(0.1, 0.02^2): mean within [0.0998, 0.1002],
        # std within [0.0197, 0.0203].
        model = small_model()
        dev = instantiate_device(model, NoiseSpec("mul", 0.1, sigma_t_ratio=0.2, master_seed=77))
        vals = np.array([sample_temporal(dev, bi).value for bi in range(100000)])
        assert 0.0998 <= vals.mean() <= 0.1002
        assert 0.0197 <= vals.std() <= 0.0203


class TestNoisyWeight:
    def test_mul_zero_temporal_identity(self):
        w = tensor([1.0, -2.0])
        mask = tensor([1.3, 0.7])
        out = noisy_weight(w, mask, TemporalSample(0.0, 0), "mul")
        assert np.array_equal(out.array, w.array)

    def test_mul_direct(self):
        w = tensor([1.0, -2.0])
        mask = tensor([1.0, 1.0])
        out = noisy_weight(w, mask, TemporalSample(0.1, 0), "mul")
        assert out.array == pytest.approx([1.1, -2.2], abs=1e-7)

    def test_add_direct(self):
        w = tensor([1.0, -2.0])
        mask = tensor([1.0, 2.0])
        out = noisy_weight(w, mask, TemporalSample(0.001, 0), "add")
        assert out.array == pytest.approx([1.001, -1.998], abs=1e-7)

    def test_add_zero_temporal_identity(self):
        w = tensor([0.5, 0.25])
        out = noisy_weight(w, tensor([2.0, 3.0]), TemporalSample(0.0, 3), "add")
        assert np.array_equal(out.array, w.array)

    def test_never_mutates_original(self):
        w = tensor([1.0, -2.0, 3.0])
        before = w.array.copy()
        noisy_weight(w, tensor([1.1, 0.9, 1.0]), TemporalSample(0.5, 0), "mul")
        noisy_weight(w, tensor([1.1, 0.9, 1.0]), TemporalSample(0.5, 0), "add")
        assert np.array_equal(w.array, before)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            noisy_weight(tensor([1.0, 2.0]), tensor([1.0]), TemporalSample(0.1, 0), "mul")

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            noisy_weight(tensor([1.0]), tensor([1.0]), TemporalSample(0.1, 0), "xor")

    def test_mul_expectation_over_temporal_draws(self):
        # E[W_noisy] = W * (1 + eta0 * N_S) elementwise; Monte Carlo over 1e5
        # temporal draws must match within 3 standard errors.
        model = small_model()
        eta0, ratio = 0.1, 0.2
        dev = instantiate_device(model, NoiseSpec("mul", eta0, sigma_t_ratio=ratio, master_seed=5))
        li = model.analog_layers()[0]
        w = model.params[li]["weight"]
        mask = dev.spatial_masks[li]
        n = 100000
        nts = np.array([sample_temporal(dev, bi).value for bi in range(n)])
        # elementwise mean over draws equals w * (1 + mean(nt) * mask)
        w64 = w.array.astype(np.float64)
        m64 = mask.array.astype(np.float64)
        mc_mean = w64 * (1.0 + nts.mean() * m64)
        expected = w64 * (1.0 + eta0 * m64)
        se = np.abs(w64 * m64) * (ratio * eta0) / np.sqrt(n)
        assert np.all(np.abs(mc_mean - expected) <= 3.0 * se + 1e-12)


class TestZeroNoiseForwardIdentity:
    @pytest.mark.parametrize("kind", ["mul", "add"])
    def test_bit_identical_logits(self, kind):
        model = small_model()
        g = np.random.default_rng(0)
        xb = Tensor(g.normal(size=(4, 1, 16, 16)))
        dev = instantiate_device(model, NoiseSpec(kind, 0.0, master_seed=4))
        clean, _ = nn.forward(model, xb, nn.ExecMode.EVAL)
        noisy, _ = nn.forward(model, xb, nn.ExecMode.EVAL, device=dev)
        assert np.array_equal(clean.array, noisy.array)

    def test_masks_fixed_but_temporal_varies(self):
        model = small_model()
        dev = instantiate_device(model, NoiseSpec("mul", 0.1, master_seed=1))
        li = model.analog_layers()[0]
        before = dev.spatial_masks[li].array.copy()
        nts = [sample_temporal(dev, bi).value for bi in range(3)]
        assert len(set(nts)) == 3
        assert np.array_equal(dev.spatial_masks[li].array, before)
