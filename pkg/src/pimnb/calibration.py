"""Noise-aware BatchNorm statistics calibration.

Running BatchNorm statistics collected during clean training stop matching the
activation distributions once weights are perturbed. Calibration rebuilds them
by sweeping (training-split) data through the noisy network in Calibrate mode:
each BatchNorm normalizes with its current mini-batch moments, and a separate
exponential moving average accumulates those moments. The first batch
initializes the average; afterwards

    mu  <- m * mu  + (1 - m) * batch_mean
    var <- m * var + (1 - m) * batch_var

with momentum m (default 0.999). The final averages replace the model's
running statistics. Dynamic calibration keeps applying the same update on test
batches so the statistics track a drifting noise environment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .data import Dataset, iter_batches
from .errors import EmptyDataError, InsufficientBatchError, InvalidMomentsError
from .noise import DeviceInstance
from .tensor import Tensor

log = logging.getLogger(__name__)

DYNAMIC_SCORING_MODES = ("pre_update", "batch_stats")

# Below this many calibration batches the EMA keeps substantial weight on its
# first-batch initialization.
MIN_RECOMMENDED_BATCHES = 1000


@dataclass(frozen=True)
class CalibrationConfig:
    momentum: float = 0.999
    passes: int = 1
    batch_size: int = 64
    dynamic: bool = False
    dynamic_scoring: str = "pre_update"

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must be in (0,1), got {self.momentum}")
        if self.batch_size < 2:
            raise InsufficientBatchError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.passes < 1:
            raise ValueError(f"passes must be >= 1, got {self.passes}")
        if self.dynamic_scoring not in DYNAMIC_SCORING_MODES:
            raise ValueError(
                f"dynamic_scoring must be one of {DYNAMIC_SCORING_MODES}, "
                f"got {self.dynamic_scoring!r}"
            )


@dataclass
class _LayerAverage:
    mu: np.ndarray
    var: np.ndarray
    initialized: bool = False


@dataclass
class CalibratedStats:
    """Per-BatchNorm-layer averaged moments, kept in float64."""

    layers: dict[int, _LayerAverage] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: nn.Model) -> "CalibratedStats":
        """Seed the averages from the model's current running statistics."""
        stats = cls()
        for i in model.bn_layers():
            s = model.bn_states[i]
            stats.layers[i] = _LayerAverage(
                mu=s.running_mean.astype(np.float64),
                var=s.running_var.astype(np.float64),
                initialized=True,
            )
        return stats

    def install(self, model: nn.Model) -> None:
        """Write the averages into the model's running statistics."""
        for i, avg in self.layers.items():
            if not avg.initialized:
                continue
            model.bn_states[i].running_mean = avg.mu.astype(np.float32)
            model.bn_states[i].running_var = avg.var.astype(np.float32)


def calibration_step(
    stats: CalibratedStats,
    layer_id: int,
    batch_mu: np.ndarray,
    batch_var: np.ndarray,
    m: float,
) -> CalibratedStats:
    """Fold one batch's moments for one layer into the running average.

    The first call for a layer initializes its average; later calls apply the
    EMA. Other layers are untouched.
    """
    mu = np.asarray(batch_mu, dtype=np.float64).reshape(-1)
    var = np.asarray(batch_var, dtype=np.float64).reshape(-1)
    if np.any(var < 0):
        raise InvalidMomentsError(f"layer {layer_id}: negative batch variance")
    avg = stats.layers.get(int(layer_id))
    if avg is None or not avg.initialized:
        stats.layers[int(layer_id)] = _LayerAverage(mu=mu.copy(), var=var.copy(), initialized=True)
    else:
        avg.mu = m * avg.mu + (1.0 - m) * mu
        avg.var = m * avg.var + (1.0 - m) * var
    return stats


def _bn_input_trace(model: nn.Model) -> tuple[dict[int, int], frozenset]:
    """Map each BatchNorm layer to the layer whose output feeds it.

    A BatchNorm at index 0 is fed by the raw batch (source -1).
    """
    sources = {i: i - 1 for i in model.bn_layers()}
    return sources, frozenset(s for s in sources.values() if s >= 0)


def _update_from_batch(stats, sources, batch, activations, m):
    for bn_idx, src_idx in sources.items():
        src = batch if src_idx < 0 else activations[src_idx]
        mu, var = nn.channel_moments(src.array)
        calibration_step(stats, bn_idx, mu, var, m)


def calibrate(
    model: nn.Model,
    device: DeviceInstance,
    data: Dataset,
    cfg: CalibrationConfig,
) -> CalibratedStats:
    """Recompute BatchNorm statistics on the noisy device and install them.

    Sweeps ``cfg.passes`` deterministic shuffles of ``data`` (which should be
    the training split: the procedure needs no knowledge of the test data).
    Temporal noise is resampled every batch, so the averages integrate over
    the temporal fluctuation. Only running statistics are modified; weights
    and the learned scale/shift are untouched.
    """
    if len(data) == 0:
        raise EmptyDataError("calibration requires a non-empty dataset")
    if data.split == "test":
        log.warning("calibrating on a test split; statistics should come from training data")
    sources, trace = _bn_input_trace(model)
    stats = CalibratedStats()
    batch_index = 0
    for p in range(cfg.passes):
        shuffle_seed = device.spec.master_seed
        for xb, _ in iter_batches(data, cfg.batch_size, shuffle_seed=shuffle_seed, epoch=p, min_batch=2):
            _, acts = nn.forward(
                model, xb, nn.ExecMode.CALIBRATE, device=device, trace=trace, batch_index=batch_index
            )
            _update_from_batch(stats, sources, xb, acts, cfg.momentum)
            batch_index += 1
    if batch_index == 0:
        raise EmptyDataError(f"no usable batches of size >= 2 in {len(data)} samples")
    if batch_index < MIN_RECOMMENDED_BATCHES:
        log.warning(
            "calibration saw %d batches; fewer than %d leaves heavy weight on the first batch "
            "(momentum %.4g). Consider more passes or a smaller batch size.",
            batch_index, MIN_RECOMMENDED_BATCHES, cfg.momentum,
        )
    stats.install(model)
    return stats


def eval_with_dynamic_calibration(
    model: nn.Model,
    device: Optional[DeviceInstance],
    test_data: Dataset,
    cfg: CalibrationConfig,
) -> tuple[nn.EvalResult, CalibratedStats]:
    """Evaluate while (optionally) continuing the calibration on test batches.

    With ``cfg.dynamic`` false this is a plain frozen-statistics evaluation.
    Otherwise each batch is scored first and then folded into the EMA
    ('pre_update', the default: predictions never see their own batch's
    update), or scored with its own batch statistics ('batch_stats', the
    literal in-loop reading). Mutates the model's running statistics.
    """
    if len(test_data) == 0:
        raise EmptyDataError("evaluation requires a non-empty dataset")
    stats = CalibratedStats.from_model(model)
    if not cfg.dynamic:
        return nn.evaluate(model, test_data, batch_size=cfg.batch_size, device=device), stats

    sources, trace = _bn_input_trace(model)
    correct = 0
    total = 0
    for bi, (xb, yb) in enumerate(iter_batches(test_data, cfg.batch_size)):
        single = xb.shape[0] < 2
        mode = nn.ExecMode.EVAL
        if cfg.dynamic_scoring == "batch_stats" and not single:
            mode = nn.ExecMode.CALIBRATE
        logits, acts = nn.forward(model, xb, mode, device=device, trace=trace, batch_index=bi)
        pred = logits.array.argmax(axis=1)
        correct += int((pred == yb).sum())
        total += len(yb)
        if not single:
            _update_from_batch(stats, sources, xb, acts, cfg.momentum)
            stats.install(model)
    return nn.EvalResult(accuracy=correct / total, correct=correct, num_samples=total), stats
