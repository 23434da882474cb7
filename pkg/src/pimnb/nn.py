"""Sequential network engine: layer specs, forward passes, BatchNorm modes.

The engine executes a flat list of layers. Convolution and linear weights are
the "analog" tensors: when a device instance is supplied to ``forward``, their
weights are replaced by the device's noisy realization for the current batch.
BatchNorm, activations and pooling always run in exact arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import rng
from .errors import (
    CorruptedStateError,
    InsufficientBatchError,
    ShapeError,
    UnknownLayerError,
)
from .noise import DeviceInstance, noisy_weight, sample_temporal, sample_temporal_for_layer
from .tensor import Tensor


# ---------------------------------------------------------------------------
# Layer specs


@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    padding: int = 0
    has_bias: bool = True

    def __post_init__(self):
        if min(self.in_ch, self.out_ch, self.kernel, self.stride) < 1 or self.padding < 0:
            raise ValueError(f"invalid Conv2d hyperparameters: {self}")


@dataclass(frozen=True)
class Linear:
    in_dim: int
    out_dim: int
    has_bias: bool = True

    def __post_init__(self):
        if min(self.in_dim, self.out_dim) < 1:
            raise ValueError(f"invalid Linear hyperparameters: {self}")


@dataclass(frozen=True)
class BatchNorm2d:
    channels: int
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.channels < 1 or not self.epsilon > 0:
            raise ValueError(f"invalid BatchNorm2d hyperparameters: {self}")


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool2d:
    kernel: int
    stride: int

    def __post_init__(self):
        if min(self.kernel, self.stride) < 1:
            raise ValueError(f"invalid MaxPool2d hyperparameters: {self}")


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Union[Conv2d, Linear, BatchNorm2d, ReLU, MaxPool2d, GlobalAvgPool, Flatten]

ANALOG_KINDS = (Conv2d, Linear)


class ExecMode(Enum):
    TRAIN = "train"        # batch statistics normalize; training EMA updated
    EVAL = "eval"          # running statistics normalize; no state change
    CALIBRATE = "calibrate"  # batch statistics normalize; EMA owned by the calibration module


@dataclass
class BNStats:
    """Per-channel BatchNorm state: running moments plus learned scale/shift.

    ``momentum`` is the training-mode EMA momentum (running <- m*running +
    (1-m)*batch); the calibration EMA has its own momentum and lives outside
    this type.
    """

    running_mean: np.ndarray
    running_var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.9

    def __post_init__(self):
        for name in ("running_mean", "running_var", "gamma", "beta"):
            arr = np.asarray(getattr(self, name), dtype=np.float32).reshape(-1).copy()
            setattr(self, name, arr)
        n = len(self.running_mean)
        if not all(len(getattr(self, f)) == n for f in ("running_var", "gamma", "beta")):
            raise ShapeError("BNStats vectors must share one channel count")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")

    @property
    def channels(self) -> int:
        return len(self.running_mean)

    @classmethod
    def identity(cls, channels: int, epsilon: float = 1e-5, momentum: float = 0.9) -> "BNStats":
        return cls(
            running_mean=np.zeros(channels, np.float32),
            running_var=np.ones(channels, np.float32),
            gamma=np.ones(channels, np.float32),
            beta=np.zeros(channels, np.float32),
            epsilon=epsilon,
            momentum=momentum,
        )

    def copy(self) -> "BNStats":
        return BNStats(
            running_mean=self.running_mean,
            running_var=self.running_var,
            gamma=self.gamma,
            beta=self.beta,
            epsilon=self.epsilon,
            momentum=self.momentum,
        )


class Model:
    """A sequential network: layer specs, parameter tensors, BatchNorm state.

    Parameters are immutable tensors and may be shared between copies; BNStats
    are mutable and deep-copied by ``copy()``. Eval-mode forward never mutates
    a model, so a single instance may serve many threads in that mode.
    """

    def __init__(self, layers, params, bn_states):
        self.layers: tuple[LayerSpec, ...] = tuple(layers)
        self.params: dict[int, dict[str, Tensor]] = {int(i): dict(p) for i, p in params.items()}
        self.bn_states: dict[int, BNStats] = {int(i): s for i, s in bn_states.items()}
        self._validate()

    # -- construction checks ------------------------------------------------

    def _validate(self) -> None:
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2d):
                self._check_param(i, "weight", (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel))
                self._check_bias(i, layer.has_bias, layer.out_ch)
            elif isinstance(layer, Linear):
                self._check_param(i, "weight", (layer.out_dim, layer.in_dim))
                self._check_bias(i, layer.has_bias, layer.out_dim)
            elif isinstance(layer, BatchNorm2d):
                stats = self.bn_states.get(i)
                if stats is None:
                    raise ShapeError(f"layer {i}: BatchNorm2d has no BNStats")
                if stats.channels != layer.channels:
                    raise ShapeError(
                        f"layer {i}: BNStats channels {stats.channels} != {layer.channels}"
                    )
            elif i in self.params or i in self.bn_states:
                raise ShapeError(f"layer {i} ({type(layer).__name__}) cannot carry parameters")
        for i in self.params:
            if not isinstance(self.layers[i], ANALOG_KINDS):
                raise ShapeError(f"params present for non-parametric layer {i}")
        for i in self.bn_states:
            if not isinstance(self.layers[i], BatchNorm2d):
                raise ShapeError(f"BNStats present for non-BatchNorm layer {i}")

    def _check_param(self, i: int, name: str, shape: tuple[int, ...]) -> None:
        p = self.params.get(i, {}).get(name)
        if p is None:
            raise ShapeError(f"layer {i}: missing {name} tensor")
        if p.shape != shape:
            raise ShapeError(f"layer {i}: {name} shape {p.shape}, expected {shape}")

    def _check_bias(self, i: int, has_bias: bool, n: int) -> None:
        b = self.params.get(i, {}).get("bias")
        if has_bias:
            if b is None or b.shape != (n,):
                raise ShapeError(f"layer {i}: bias must have shape ({n},)")
        elif b is not None:
            raise ShapeError(f"layer {i}: bias present but has_bias is false")

    # -- convenience --------------------------------------------------------

    def analog_layers(self) -> tuple[int, ...]:
        return tuple(i for i, l in enumerate(self.layers) if isinstance(l, ANALOG_KINDS))

    def bn_layers(self) -> tuple[int, ...]:
        return tuple(i for i, l in enumerate(self.layers) if isinstance(l, BatchNorm2d))

    def num_params(self) -> int:
        total = sum(t.size for p in self.params.values() for t in p.values())
        total += sum(2 * s.channels for s in self.bn_states.values())
        return total

    def copy(self) -> "Model":
        return Model(
            self.layers,
            {i: dict(p) for i, p in self.params.items()},
            {i: s.copy() for i, s in self.bn_states.items()},
        )

    def replace_params(self, new_params: dict[int, dict[str, Tensor]]) -> "Model":
        """New model with some parameter tensors swapped; BN state is copied."""
        merged = {i: dict(p) for i, p in self.params.items()}
        for i, p in new_params.items():
            merged.setdefault(i, {}).update(p)
        return Model(self.layers, merged, {i: s.copy() for i, s in self.bn_states.items()})


# ---------------------------------------------------------------------------
# Layer kernels (dtype-generic, raw ndarray in/out)


def conv2d_apply(x, w, b, stride: int, padding: int):
    """Cross-correlation of NCHW input with OIHW weights. Returns (y, xp).

    Uses im2col so the whole layer is one matrix product.
    """
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n_, _, oh, ow = win.shape[:4]
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    y = col @ w.reshape(f, c * kh * kw).T
    if b is not None:
        y += b[None, :]
    y = np.ascontiguousarray(y.reshape(n, oh, ow, f).transpose(0, 3, 1, 2))
    return y, xp


def linear_apply(x, w, b):
    """x[N,D] @ w[K,D]^T + b, accumulated in float64."""
    y = x.astype(np.float64) @ w.astype(np.float64).T
    if b is not None:
        y += b.astype(np.float64)
    return y.astype(x.dtype)


def relu_apply(x):
    return np.maximum(x, 0)


def maxpool_apply(x, kernel: int, stride: int):
    """Max pooling over kxk windows; returns the pooled map."""
    oh = (x.shape[2] - kernel) // stride + 1
    ow = (x.shape[3] - kernel) // stride + 1
    y = None
    for i in range(kernel):
        for j in range(kernel):
            patch = x[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride]
            y = patch.copy() if y is None else np.maximum(y, patch, out=y)
    return y


def maxpool_apply_with_idx(x, kernel: int, stride: int):
    """Max pooling that also returns flat argmax indices (for backprop)."""
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    flat = win.reshape(n, c, oh, ow, kernel * kernel)
    idx = flat.argmax(axis=4)
    y = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]
    return np.ascontiguousarray(y), idx


def gap_apply(x):
    """Global average pooling to [N,C,1,1], accumulated in float64."""
    return x.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.dtype)


def flatten_apply(x):
    return x.reshape(x.shape[0], -1)


def channel_moments(x) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel population mean/variance of NCHW data, accumulated in float64."""
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    centered = x - mean[None, :, None, None].astype(x.dtype)
    var = np.mean(centered * centered, axis=(0, 2, 3), dtype=np.float64)
    return mean, var


def bn_normalize(x, mean, var, gamma, beta, eps):
    """Affine-normalize NCHW data with per-channel statistics."""
    invstd = 1.0 / np.sqrt(var + eps)
    scale = gamma * invstd
    shift = beta - mean * scale
    return x * scale[None, :, None, None] + shift[None, :, None, None]


# ---------------------------------------------------------------------------
# BatchNorm forward


def _batchnorm_array(x: np.ndarray, stats: BNStats, mode: ExecMode) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"BatchNorm input must be NCHW, got shape {x.shape}")
    if x.shape[1] != stats.channels:
        raise ShapeError(f"BatchNorm channels {stats.channels} != input C={x.shape[1]}")
    dt = x.dtype
    if mode is ExecMode.EVAL:
        if np.any(stats.running_var < 0):
            raise CorruptedStateError("running_var has negative entries")
        mean = stats.running_mean.astype(dt)
        var = stats.running_var.astype(dt)
    else:
        n, _, h, w = x.shape
        if n * h * w < 2:
            raise InsufficientBatchError(
                f"batch statistics need >= 2 values per channel, got {n * h * w}"
            )
        mean64, var64 = channel_moments(x)
        mean = mean64.astype(dt)
        var = var64.astype(dt)
        if mode is ExecMode.TRAIN:
            m = stats.momentum
            stats.running_mean = (
                m * stats.running_mean.astype(np.float64) + (1.0 - m) * mean64
            ).astype(np.float32)
            stats.running_var = (
                m * stats.running_var.astype(np.float64) + (1.0 - m) * var64
            ).astype(np.float32)
    return bn_normalize(x, mean, var, stats.gamma.astype(dt), stats.beta.astype(dt), dt.type(stats.epsilon))


def batchnorm_forward(x: Tensor, stats: BNStats, mode: ExecMode) -> Tensor:
    """Normalize ``x`` per channel.

    Train/Calibrate use the batch moments (Train additionally updates the
    running EMA); Eval uses the stored running statistics.
    """
    return Tensor._wrap(_batchnorm_array(x.array, stats, mode))


# ---------------------------------------------------------------------------
# Full forward pass


def forward(
    model: Model,
    batch: Tensor,
    mode: ExecMode,
    *,
    device: Optional[DeviceInstance] = None,
    trace: Optional[set] = None,
    batch_index: int = 0,
) -> tuple[Tensor, dict[int, Tensor]]:
    """Run the network over one batch.

    When ``device`` is given, every conv/linear weight is replaced by its
    noisy realization for ``batch_index``. ``trace`` selects layer indices
    whose post-layer activations are returned.
    """
    if mode in (ExecMode.TRAIN, ExecMode.CALIBRATE) and batch.shape[0] < 2:
        raise InsufficientBatchError(f"mode {mode.value} needs N >= 2, got N={batch.shape[0]}")
    trace_ids = frozenset(int(i) for i in trace) if trace else frozenset()
    for i in trace_ids:
        if i < 0 or i >= len(model.layers):
            raise UnknownLayerError(f"trace id {i} out of range for {len(model.layers)} layers")

    nt_global = None
    if device is not None and device.spec.temporal_granularity == "global":
        nt_global = sample_temporal(device, batch_index)

    x = batch.array
    activations: dict[int, Tensor] = {}
    for i, layer in enumerate(model.layers):
        x = _apply_layer(model, i, layer, x, mode, device, nt_global, batch_index)
        if i in trace_ids:
            t = Tensor._wrap(x)
            activations[i] = t
            x = t.array  # frozen but read-only use downstream
    return Tensor._wrap(x), activations


def _effective_weights(model, i, device, nt_global, batch_index):
    w = model.params[i]["weight"]
    b = model.params[i].get("bias")
    if device is not None and i in device.spatial_masks:
        nt = nt_global
        if nt is None:
            nt = sample_temporal_for_layer(device, batch_index, i)
        w = noisy_weight(w, device.spatial_masks[i], nt, device.spec.kind)
        if b is not None and i in device.bias_masks:
            b = noisy_weight(b, device.bias_masks[i], nt, device.spec.kind)
    return w.array, None if b is None else b.array


def _apply_layer(model, i, layer, x, mode, device, nt_global, batch_index):
    name = type(layer).__name__
    if isinstance(layer, Conv2d):
        if x.ndim != 4 or x.shape[1] != layer.in_ch:
            raise ShapeError(f"layer {i} ({name}): expected [N,{layer.in_ch},H,W], got {x.shape}")
        if x.shape[2] + 2 * layer.padding < layer.kernel or x.shape[3] + 2 * layer.padding < layer.kernel:
            raise ShapeError(f"layer {i} ({name}): input {x.shape} smaller than kernel")
        w, b = _effective_weights(model, i, device, nt_global, batch_index)
        y, _ = conv2d_apply(x, w, b, layer.stride, layer.padding)
        return y
    if isinstance(layer, Linear):
        if x.ndim != 2 or x.shape[1] != layer.in_dim:
            raise ShapeError(f"layer {i} ({name}): expected [N,{layer.in_dim}], got {x.shape}")
        w, b = _effective_weights(model, i, device, nt_global, batch_index)
        return linear_apply(x, w, b)
    if isinstance(layer, BatchNorm2d):
        try:
            return _batchnorm_array(x, model.bn_states[i], mode)
        except ShapeError as e:
            raise ShapeError(f"layer {i} ({name}): {e}") from None
    if isinstance(layer, ReLU):
        return relu_apply(x)
    if isinstance(layer, MaxPool2d):
        if x.ndim != 4 or x.shape[2] < layer.kernel or x.shape[3] < layer.kernel:
            raise ShapeError(f"layer {i} ({name}): cannot pool {x.shape} with k={layer.kernel}")
        return maxpool_apply(x, layer.kernel, layer.stride)
    if isinstance(layer, GlobalAvgPool):
        if x.ndim != 4:
            raise ShapeError(f"layer {i} ({name}): expected NCHW, got {x.shape}")
        return gap_apply(x)
    if isinstance(layer, Flatten):
        if x.ndim < 2:
            raise ShapeError(f"layer {i} ({name}): expected rank >= 2, got {x.shape}")
        return flatten_apply(x)
    raise TypeError(f"unsupported layer {layer!r}")


# ---------------------------------------------------------------------------
# Presets and evaluation


def reference_cnn(in_channels: int = 1, num_classes: int = 10, seed: int = 0) -> Model:
    """The desk-scale reference CNN with three BatchNorm stages.

    Conv(C->16,3x3,pad1)-BN-ReLU-Pool2 / Conv(16->32)-BN-ReLU-Pool2 /
    Conv(32->32)-BN-ReLU-GlobalAvgPool-Flatten-Linear(32->classes).
    """
    layers = [
        Conv2d(in_channels, 16, 3, 1, 1),
        BatchNorm2d(16),
        ReLU(),
        MaxPool2d(2, 2),
        Conv2d(16, 32, 3, 1, 1),
        BatchNorm2d(32),
        ReLU(),
        MaxPool2d(2, 2),
        Conv2d(32, 32, 3, 1, 1),
        BatchNorm2d(32),
        ReLU(),
        GlobalAvgPool(),
        Flatten(),
        Linear(32, num_classes),
    ]
    params: dict[int, dict[str, Tensor]] = {}
    bn_states: dict[int, BNStats] = {}
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv2d):
            fan_in = layer.in_ch * layer.kernel * layer.kernel
            g = rng.stream(seed, rng.INIT, i)
            w = g.normal(0.0, np.sqrt(2.0 / fan_in), size=(layer.out_ch, layer.in_ch, layer.kernel, layer.kernel))
            params[i] = {"weight": Tensor(w), "bias": Tensor(np.zeros(layer.out_ch))}
        elif isinstance(layer, Linear):
            g = rng.stream(seed, rng.INIT, i)
            w = g.normal(0.0, np.sqrt(2.0 / layer.in_dim), size=(layer.out_dim, layer.in_dim))
            params[i] = {"weight": Tensor(w), "bias": Tensor(np.zeros(layer.out_dim))}
        elif isinstance(layer, BatchNorm2d):
            bn_states[i] = BNStats.identity(layer.channels, layer.epsilon)
    return Model(layers, params, bn_states)


PRESETS = {"reference": reference_cnn}


@dataclass
class EvalResult:
    accuracy: float
    correct: int
    num_samples: int


def evaluate(
    model: Model,
    dataset,
    batch_size: int = 256,
    device: Optional[DeviceInstance] = None,
    start_batch_index: int = 0,
) -> EvalResult:
    """Eval-mode accuracy over a dataset, batches in dataset order."""
    from .data import iter_batches

    correct = 0
    total = 0
    for bi, (xb, yb) in enumerate(iter_batches(dataset, batch_size)):
        logits, _ = forward(model, xb, ExecMode.EVAL, device=device, batch_index=start_batch_index + bi)
        pred = logits.array.argmax(axis=1)
        correct += int((pred == yb).sum())
        total += len(yb)
    return EvalResult(accuracy=correct / total, correct=correct, num_samples=total)
