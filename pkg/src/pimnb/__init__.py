"""Analog weight-noise simulation with noise-aware BatchNorm calibration.

A small pure-numpy stack: dense float32 tensors, a sequential CNN engine with
trainable BatchNorm, a two-factor (temporal x spatial) weight-noise model,
statistics recalibration to recover accuracy under that noise, activation
distribution diagnostics, a from-scratch SGD trainer (with noise-injection
mode), dataset loaders, and a config-driven CLI for sweeps.
"""

__version__ = "0.1.0"

from . import errors
from .calibration import (
    CalibratedStats,
    CalibrationConfig,
    calibrate,
    calibration_step,
    eval_with_dynamic_calibration,
)
from .data import (
    Dataset,
    iter_batches,
    load_cifar10_bin,
    load_mnist_idx,
    normalize,
    split_train_val,
    synthetic_blobs,
)
from .diagnostics import (
    ActivationHistogram,
    collect_histogram_pairs,
    collect_histograms,
    divergence_report,
    js_divergence,
    kl_divergence,
)
from .model_io import FORMAT_VERSION, load_model, save_model
from .nn import (
    BatchNorm2d,
    BNStats,
    Conv2d,
    EvalResult,
    ExecMode,
    Flatten,
    GlobalAvgPool,
    Linear,
    MaxPool2d,
    Model,
    ReLU,
    batchnorm_forward,
    evaluate,
    forward,
    reference_cnn,
)
from .noise import (
    DeviceInstance,
    NoiseSpec,
    TemporalSample,
    instantiate_device,
    noisy_weight,
    sample_temporal,
    sample_temporal_for_layer,
)
from .tensor import Tensor, elementwise, matmul, moments, tensor, zeros
from .trainer import (
    TrainConfig,
    TrainReport,
    backward,
    cosine_lr,
    forward_train,
    loss_and_grads,
    noise_injection_finetune,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
