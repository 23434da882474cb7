"""Analog weight-noise model: spatial masks per device, temporal factor per batch.

Two perturbation kinds are supported. With temporal factor t (one scalar per
inference batch) and spatial mask S (one entry per weight, fixed when the
device is instantiated):

    mul:  W_noisy = W + W * t * S      (error scales with weight magnitude)
    add:  W_noisy = W + t * S          (error independent of the weight)

t is drawn from Normal(eta0, (sigma_t_ratio*eta0)^2) and models chip-wide
supply-voltage/temperature drift; S is drawn elementwise from
Normal(1, sigma_s^2) and models manufacturing variation. Both draws come from
counter-based streams keyed by the master seed, so a device realization and
its per-batch factors are exactly reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import ShapeError
from .tensor import Tensor

NOISE_KINDS = ("mul", "add")
TEMPORAL_GRANULARITIES = ("global", "per_layer")


@dataclass(frozen=True)
class NoiseSpec:
    """Noise parameters; defaults give the strict sigma_t=0.2*eta0, sigma_s=0.1 setting."""

    kind: str
    eta0: float
    sigma_t_ratio: float = 0.2
    sigma_s: float = 0.1
    master_seed: int = 0
    temporal_granularity: str = "global"
    noise_biases: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", str(self.kind).lower())
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if self.eta0 < 0 or self.sigma_t_ratio < 0 or self.sigma_s < 0:
            raise ValueError("eta0, sigma_t_ratio and sigma_s must be >= 0")
        if self.master_seed < 0:
            raise ValueError("master_seed must be >= 0")
        if self.temporal_granularity not in TEMPORAL_GRANULARITIES:
            raise ValueError(
                f"temporal_granularity must be one of {TEMPORAL_GRANULARITIES}, "
                f"got {self.temporal_granularity!r}"
            )

    @property
    def sigma_t(self) -> float:
        return self.sigma_t_ratio * self.eta0


@dataclass(frozen=True)
class TemporalSample:
    """One temporal noise factor; a pure function of (master seed, batch index)."""

    value: float
    batch_index: int


@dataclass(frozen=True)
class DeviceInstance:
    """One sampled hardware realization: fixed spatial masks for a model.

    Immutable after creation, so a single device may be shared across threads;
    temporal factors are derived on demand from (seed, batch index).
    """

    spec: NoiseSpec
    spatial_masks: dict[int, Tensor]
    bias_masks: dict[int, Tensor] = field(default_factory=dict)


def _gaussian_mask(spec: NoiseSpec, purpose_indices: tuple[int, ...], shape) -> Tensor:
    g = rng.stream(spec.master_seed, rng.SPATIAL, *purpose_indices)
    mask = g.normal(1.0, spec.sigma_s, size=shape)
    return Tensor._wrap(mask.astype(np.float32))


def instantiate_device(model, spec: NoiseSpec) -> DeviceInstance:
    """Sample one spatial mask per analog (conv/linear) weight tensor.

    Re-instantiating with the same seed reproduces the masks bit for bit.
    """
    masks: dict[int, Tensor] = {}
    bias_masks: dict[int, Tensor] = {}
    for li in model.analog_layers():
        masks[li] = _gaussian_mask(spec, (li,), model.params[li]["weight"].shape)
        if spec.noise_biases and "bias" in model.params[li]:
            bias_masks[li] = _gaussian_mask(spec, (li, 1), model.params[li]["bias"].shape)
    return DeviceInstance(spec=spec, spatial_masks=masks, bias_masks=bias_masks)


def sample_temporal(device: DeviceInstance, batch_index: int) -> TemporalSample:
    """Temporal factor for one inference batch (chip-global scalar)."""
    if batch_index < 0:
        raise ValueError(f"batch_index must be >= 0, got {batch_index}")
    spec = device.spec
    g = rng.stream(spec.master_seed, rng.TEMPORAL, batch_index)
    return TemporalSample(value=float(g.normal(spec.eta0, spec.sigma_t)), batch_index=batch_index)


def sample_temporal_for_layer(device: DeviceInstance, batch_index: int, layer_index: int) -> TemporalSample:
    """Per-layer temporal factor (the 'per_layer' granularity alternative)."""
    if batch_index < 0 or layer_index < 0:
        raise ValueError("batch_index and layer_index must be >= 0")
    spec = device.spec
    g = rng.stream(spec.master_seed, rng.TEMPORAL, batch_index, layer_index)
    return TemporalSample(value=float(g.normal(spec.eta0, spec.sigma_t)), batch_index=batch_index)


def noisy_weight(w_orig: Tensor, mask: Tensor, nt: TemporalSample, kind: str) -> Tensor:
    """Perturbed copy of a weight tensor; the original is never modified.

    A zero temporal factor short-circuits to the identity for both kinds, so
    eta0 = 0 reproduces clean weights bit for bit.
    """
    if mask.shape != w_orig.shape:
        raise ShapeError(f"mask shape {mask.shape} != weight shape {w_orig.shape}")
    if nt.value == 0.0:
        return w_orig
    scaled = np.float32(nt.value) * mask.array
    if kind == "mul":
        out = w_orig.array + w_orig.array * scaled
    elif kind == "add":
        out = w_orig.array + scaled
    else:
        raise ValueError(f"noise kind must be one of {NOISE_KINDS}, got {kind!r}")
    return Tensor._wrap(out)
