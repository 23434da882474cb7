"""From-scratch training: backprop, SGD with momentum, noise-injection mode.

Gradients are exact analytic derivatives of the mean cross-entropy, including
the full path through BatchNorm batch statistics. When a noise spec is active,
every forward pass perturbs the weights (fresh temporal factor per batch,
spatial masks resampled each epoch so no single device realization can be
memorized) while gradients flow straight through to the clean master weights:
the perturbation is affine in W, so dW_noisy/dW is (1 + t*S) for mul noise and
1 for add noise.

All production training runs in float32; a float64 path exists for the
finite-difference gradient harness, which float32 central differences cannot
certify.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import nn, rng
from .data import Dataset, iter_batches
from .errors import TrainerStateError, TrainingDivergedError
from .noise import NoiseSpec, instantiate_device, sample_temporal
from .tensor import Tensor

ParamKey = tuple[int, str]  # (layer index, one of weight/bias/gamma/beta)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 32
    lr: float = 0.05
    schedule: str = "cosine"            # cosine | constant
    momentum_sgd: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    noise: Optional[NoiseSpec] = None   # noise-injection training when present

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"schedule must be cosine or constant, got {self.schedule!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    wall_seconds: float = 0.0
    best_epoch: int = 0
    best_val_acc: float = 0.0
    baseline_met: Optional[bool] = None

    def to_csv_rows(self):
        return [(r.epoch, r.train_loss, r.train_acc, r.val_acc) for r in self.records]


def cosine_lr(lr0: float, step: int, total_steps: int) -> float:
    """lr0 * (1 + cos(pi * step / total_steps)) / 2; exactly 0 at step == total_steps."""
    t = min(max(step, 0), total_steps)
    return lr0 * 0.5 * (1.0 + np.cos(np.pi * t / total_steps))


# ---------------------------------------------------------------------------
# Cached forward / analytic backward


@dataclass
class TrainCache:
    layers: tuple
    params: dict[ParamKey, np.ndarray]
    entries: list
    logits: np.ndarray
    batch_n: int
    dtype: np.dtype
    bn_batch_moments: dict[int, tuple[np.ndarray, np.ndarray]]  # float64 (mean, var)


def _extract_params(model: nn.Model, dtype) -> dict[ParamKey, np.ndarray]:
    params: dict[ParamKey, np.ndarray] = {}
    for i in model.analog_layers():
        for name, t in model.params[i].items():
            params[(i, name)] = t.array.astype(dtype)
    for i in model.bn_layers():
        s = model.bn_states[i]
        params[(i, "gamma")] = s.gamma.astype(dtype)
        params[(i, "beta")] = s.beta.astype(dtype)
    return params


def trainable_params(model: nn.Model) -> dict[ParamKey, np.ndarray]:
    """Float32 copies of every trainable array, keyed by (layer, name)."""
    return _extract_params(model, np.float32)


def model_with_params(model: nn.Model, params: dict[ParamKey, np.ndarray]) -> nn.Model:
    """New model with the given trainable arrays installed (cast to float32)."""
    new_tensors: dict[int, dict[str, Tensor]] = {}
    m2 = model.copy()
    for (i, name), arr in params.items():
        if name in ("weight", "bias"):
            new_tensors.setdefault(i, {})[name] = Tensor(np.asarray(arr, dtype=np.float32))
        elif name == "gamma":
            m2.bn_states[i].gamma = np.asarray(arr, dtype=np.float32).copy()
        elif name == "beta":
            m2.bn_states[i].beta = np.asarray(arr, dtype=np.float32).copy()
        else:
            raise KeyError(f"unknown trainable parameter {name!r}")
    return m2.replace_params(new_tensors)


def _noise_arrays(model, device, batch_index, dtype):
    """Per-layer (w_eff, b_eff, w_factor, b_factor) for one batch, or None."""
    if device is None:
        return None
    nt = sample_temporal(device, batch_index)
    out = {}
    for i in model.analog_layers():
        w = model.params[i]["weight"].array.astype(dtype)
        b = model.params[i].get("bias")
        b = None if b is None else b.array.astype(dtype)
        mask = device.spatial_masks.get(i)
        if mask is None or nt.value == 0.0:
            out[i] = (w, b, None, None)
            continue
        scaled = dtype.type(nt.value) * mask.array.astype(dtype)
        if device.spec.kind == "mul":
            w_factor = 1.0 + scaled
            w_eff = w * w_factor
        else:
            w_factor = None
            w_eff = w + scaled
        b_eff, b_factor = b, None
        if b is not None and i in device.bias_masks:
            bscaled = dtype.type(nt.value) * device.bias_masks[i].array.astype(dtype)
            if device.spec.kind == "mul":
                b_factor = 1.0 + bscaled
                b_eff = b * b_factor
            else:
                b_eff = b + bscaled
        out[i] = (w_eff, b_eff, w_factor, b_factor)
    return out


def forward_train(
    model: nn.Model,
    batch: Tensor,
    device=None,
    batch_index: int = 0,
    dtype=np.float32,
) -> tuple[Tensor, TrainCache]:
    """Train-mode forward (batch statistics) with cached intermediates.

    Pure: running statistics are not touched; the cached per-layer batch
    moments let the training loop apply its own EMA update.
    """
    dtype = np.dtype(dtype)
    params = _extract_params(model, dtype)
    noise = _noise_arrays(model, device, batch_index, dtype)
    x = batch.array.astype(dtype)
    entries = []
    bn_moments: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for i, layer in enumerate(model.layers):
        if isinstance(layer, nn.Conv2d):
            if noise is not None and i in noise:
                w, b, w_factor, _ = noise[i]
            else:
                w, b, w_factor = params[(i, "weight")], params.get((i, "bias")), None
            y, xp = nn.conv2d_apply(x, w, b, layer.stride, layer.padding)
            entries.append(("conv", i, xp, w, w_factor, layer.stride, layer.padding, x.shape))
            x = y
        elif isinstance(layer, nn.Linear):
            if noise is not None and i in noise:
                w, b, w_factor, _ = noise[i]
            else:
                w, b, w_factor = params[(i, "weight")], params.get((i, "bias")), None
            entries.append(("linear", i, x, w, w_factor))
            x = nn.linear_apply(x, w, b)
        elif isinstance(layer, nn.BatchNorm2d):
            mean64, var64 = nn.channel_moments(x)
            bn_moments[i] = (mean64, var64)
            mean = mean64.astype(dtype)
            var = var64.astype(dtype)
            gamma = params[(i, "gamma")]
            invstd = 1.0 / np.sqrt(var + dtype.type(model.bn_states[i].epsilon))
            xhat = (x - mean[None, :, None, None]) * invstd[None, :, None, None]
            entries.append(("bn", i, xhat, invstd, gamma))
            x = xhat * gamma[None, :, None, None] + params[(i, "beta")][None, :, None, None]
        elif isinstance(layer, nn.ReLU):
            entries.append(("relu", i, x > 0))
            x = nn.relu_apply(x)
        elif isinstance(layer, nn.MaxPool2d):
            y, idx = nn.maxpool_apply_with_idx(x, layer.kernel, layer.stride)
            entries.append(("maxpool", i, idx, x.shape, layer.kernel, layer.stride))
            x = y
        elif isinstance(layer, nn.GlobalAvgPool):
            entries.append(("gap", i, x.shape))
            x = nn.gap_apply(x)
        elif isinstance(layer, nn.Flatten):
            entries.append(("flatten", i, x.shape))
            x = nn.flatten_apply(x)
        else:
            raise TypeError(f"unsupported layer {layer!r}")
    cache = TrainCache(
        layers=model.layers,
        params=params,
        entries=entries,
        logits=x,
        batch_n=batch.shape[0],
        dtype=dtype,
        bn_batch_moments=bn_moments,
    )
    return Tensor._wrap(x.astype(np.float32)), cache


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy loss and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = logits.shape[0]
    idx = np.arange(n)
    loss = float(-logp[idx, labels].mean())
    dlogits = np.exp(logp)
    dlogits[idx, labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def backward(model: nn.Model, cache: Optional[TrainCache], labels: np.ndarray) -> dict[ParamKey, np.ndarray]:
    """Analytic gradients of the mean cross-entropy w.r.t. all trainables.

    Requires the TrainCache of a forward pass over the same batch.
    """
    if cache is None:
        raise TrainerStateError("backward requires the cache of a prior forward_train call")
    labels = np.asarray(labels).reshape(-1)
    if cache.layers != model.layers or len(labels) != cache.batch_n:
        raise TrainerStateError("cache does not match this model/batch")
    _, dlogits = softmax_cross_entropy(cache.logits, labels)
    return _backward_from(cache, dlogits)


def _backward_from(cache: TrainCache, dlogits: np.ndarray) -> dict[ParamKey, np.ndarray]:
    grads: dict[ParamKey, np.ndarray] = {}
    dy = dlogits
    for entry in reversed(cache.entries):
        kind = entry[0]
        if kind == "linear":
            _, i, x_in, w, w_factor = entry
            dw = dy.T @ x_in
            if (i, "bias") in cache.params:
                grads[(i, "bias")] = dy.sum(axis=0)
            grads[(i, "weight")] = dw * w_factor if w_factor is not None else dw
            dy = dy @ w
        elif kind == "conv":
            _, i, xp, w, w_factor, stride, padding, x_shape = entry
            dy = np.ascontiguousarray(dy)
            n, f, oh, ow = dy.shape
            kh, kw = w.shape[2], w.shape[3]
            dw = np.zeros_like(w)
            dxp = np.zeros_like(xp)
            for a in range(kh):
                for b_ in range(kw):
                    rows = slice(a, a + stride * (oh - 1) + 1, stride)
                    cols = slice(b_, b_ + stride * (ow - 1) + 1, stride)
                    patch = xp[:, :, rows, cols]
                    dw[:, :, a, b_] = np.tensordot(dy, patch, axes=([0, 2, 3], [0, 2, 3]))
                    dxp[:, :, rows, cols] += np.tensordot(dy, w[:, :, a, b_], axes=([1], [0])).transpose(0, 3, 1, 2)
            if (i, "bias") in cache.params:
                grads[(i, "bias")] = dy.sum(axis=(0, 2, 3))
            grads[(i, "weight")] = dw * w_factor if w_factor is not None else dw
            if padding:
                dy = dxp[:, :, padding:-padding, padding:-padding]
            else:
                dy = dxp
        elif kind == "bn":
            _, i, xhat, invstd, gamma = entry
            grads[(i, "beta")] = dy.sum(axis=(0, 2, 3))
            grads[(i, "gamma")] = (dy * xhat).sum(axis=(0, 2, 3))
            m = dy.shape[0] * dy.shape[2] * dy.shape[3]
            dxhat = dy * gamma[None, :, None, None]
            mean_dxhat = dxhat.mean(axis=(0, 2, 3))
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=(0, 2, 3))
            dy = invstd[None, :, None, None] * (
                dxhat - mean_dxhat[None, :, None, None] - xhat * mean_dxhat_xhat[None, :, None, None]
            )
        elif kind == "relu":
            _, i, mask = entry
            dy = dy * mask
        elif kind == "maxpool":
            _, i, idx, x_shape, kernel, stride = entry
            dx = np.zeros(x_shape, dtype=dy.dtype)
            n, c, oh, ow = idx.shape
            ns, cs, ohs, ows = np.ix_(np.arange(n), np.arange(c), np.arange(oh), np.arange(ow))
            h_pos = ohs * stride + idx // kernel
            w_pos = ows * stride + idx % kernel
            np.add.at(dx, (ns, cs, h_pos, w_pos), dy)
            dy = dx
        elif kind == "gap":
            _, i, x_shape = entry
            scale = 1.0 / (x_shape[2] * x_shape[3])
            dy = np.broadcast_to(dy * scale, x_shape).astype(dy.dtype, copy=True)
        elif kind == "flatten":
            _, i, x_shape = entry
            dy = dy.reshape(x_shape)
        else:
            raise TrainerStateError(f"corrupt cache entry {kind!r}")
    return grads


def loss_value(
    model: nn.Model,
    batch: Tensor,
    labels: np.ndarray,
    device=None,
    batch_index: int = 0,
    dtype=np.float64,
) -> float:
    """Mean cross-entropy of a train-mode forward pass; pure."""
    _, cache = forward_train(model, batch, device=device, batch_index=batch_index, dtype=dtype)
    loss, _ = softmax_cross_entropy(cache.logits, np.asarray(labels).reshape(-1))
    return loss


def loss_and_grads(
    model: nn.Model,
    batch: Tensor,
    labels: np.ndarray,
    device=None,
    batch_index: int = 0,
    dtype=np.float32,
):
    logits, cache = forward_train(model, batch, device=device, batch_index=batch_index, dtype=dtype)
    labels = np.asarray(labels).reshape(-1)
    loss, dlogits = softmax_cross_entropy(cache.logits, labels)
    grads = _backward_from(cache, dlogits)
    return loss, logits, grads


# ---------------------------------------------------------------------------
# Training loop


def _count_batches(n: int, batch_size: int) -> int:
    tail = n % batch_size
    return n // batch_size + (1 if tail >= 2 else 0)


def _snapshot(model: nn.Model, params: dict[ParamKey, np.ndarray], running) -> nn.Model:
    tensors: dict[int, dict[str, Tensor]] = {}
    for (i, name), arr in params.items():
        if name in ("weight", "bias"):
            tensors.setdefault(i, {})[name] = Tensor(np.asarray(arr, dtype=np.float32))
    m2 = model.replace_params(tensors)
    for i in m2.bn_layers():
        s = m2.bn_states[i]
        s.gamma = params[(i, "gamma")].astype(np.float32).copy()
        s.beta = params[(i, "beta")].astype(np.float32).copy()
        mean64, var64 = running[i]
        s.running_mean = mean64.astype(np.float32)
        s.running_var = var64.astype(np.float32)
    return m2


def train(
    model: nn.Model,
    train_data: Dataset,
    val_data: Dataset,
    cfg: TrainConfig,
) -> tuple[nn.Model, TrainReport]:
    """Mini-batch SGD on mean cross-entropy; returns the best-val snapshot.

    BatchNorm layers run on batch statistics and their running EMA is updated
    with the per-layer training momentum. With ``cfg.noise`` set this is
    noise-injection training (fresh spatial masks per epoch, temporal factor
    per batch); master weights only ever change through optimizer steps.
    """
    t0 = time.perf_counter()
    dtype = np.dtype(np.float32)
    params = _extract_params(model, dtype)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    running = {
        i: (model.bn_states[i].running_mean.astype(np.float64),
            model.bn_states[i].running_var.astype(np.float64))
        for i in model.bn_layers()
    }
    decay_keys = {(i, "weight") for i in model.analog_layers()}

    steps_per_epoch = _count_batches(len(train_data), cfg.batch_size)
    if steps_per_epoch == 0:
        raise TrainingDivergedError(0, 0)  # unreachable with batch_size >= 2 and data checks
    total_steps = cfg.epochs * steps_per_epoch

    report = TrainReport()
    best_model: Optional[nn.Model] = None
    step = 0
    for epoch in range(cfg.epochs):
        device = None
        if cfg.noise is not None:
            epoch_seed = rng.derive_seed(cfg.noise.master_seed, rng.DEVICE_EPOCH, epoch)
            device = instantiate_device(model, replace(cfg.noise, master_seed=epoch_seed))
        loss_sum = 0.0
        correct = 0
        seen = 0
        n_batches = 0
        for bi, (xb, yb) in enumerate(
            iter_batches(train_data, cfg.batch_size, shuffle_seed=cfg.seed, epoch=epoch, min_batch=2)
        ):
            work = _snapshot_view(model, params)
            logits, cache = forward_train(work, xb, device=device, batch_index=step, dtype=dtype)
            loss, dlogits = softmax_cross_entropy(cache.logits, yb)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, bi)
            grads = _backward_from(cache, dlogits)

            for i, (mean64, var64) in cache.bn_batch_moments.items():
                m = model.bn_states[i].momentum
                rm, rv = running[i]
                running[i] = (m * rm + (1.0 - m) * mean64, m * rv + (1.0 - m) * var64)

            lr_t = cfg.lr if cfg.schedule == "constant" else cosine_lr(cfg.lr, step + 1, total_steps)
            for key, p in params.items():
                g = grads[key]
                if cfg.weight_decay and key in decay_keys:
                    g = g + cfg.weight_decay * p
                v = velocity[key]
                v *= cfg.momentum_sgd
                v += g
                p -= dtype.type(lr_t) * v

            loss_sum += loss
            correct += int((cache.logits.argmax(axis=1) == yb).sum())
            seen += len(yb)
            n_batches += 1
            step += 1

        snap = _snapshot(model, params, running)
        # Under noise-injection training the model is meant to be deployed on
        # a noisy device, so validation runs under the epoch's device too.
        val = nn.evaluate(snap, val_data, batch_size=max(cfg.batch_size, 256), device=device)
        rec = EpochRecord(
            epoch=epoch + 1,
            train_loss=loss_sum / max(n_batches, 1),
            train_acc=correct / max(seen, 1),
            val_acc=val.accuracy,
        )
        report.records.append(rec)
        # Ties prefer the later epoch: with a decaying schedule its BN running
        # statistics have converged on near-final weights.
        if best_model is None or rec.val_acc >= report.best_val_acc:
            report.best_val_acc = rec.val_acc
            report.best_epoch = rec.epoch
            best_model = snap

    report.wall_seconds = time.perf_counter() - t0
    return best_model, report


def _snapshot_view(model: nn.Model, params: dict[ParamKey, np.ndarray]) -> nn.Model:
    """Lightweight model whose tensors alias the training arrays (read path only)."""
    tensors: dict[int, dict[str, Tensor]] = {}
    for (i, name), arr in params.items():
        if name in ("weight", "bias"):
            tensors.setdefault(i, {})[name] = Tensor(arr)
    m2 = model.replace_params(tensors)
    for i in m2.bn_layers():
        m2.bn_states[i].gamma = params[(i, "gamma")]
        m2.bn_states[i].beta = params[(i, "beta")]
    return m2


def noise_injection_finetune(
    model: nn.Model,
    train_data: Dataset,
    val_data: Dataset,
    cfg: TrainConfig,
    baseline_acc: Optional[float] = None,
) -> tuple[nn.Model, TrainReport]:
    """Fine-tune a pre-trained model under simulated weight noise.

    Identical to ``train`` with a noise spec (which must be present). When
    ``baseline_acc`` is given, the report records whether the best validation
    accuracy reached it.
    """
    if cfg.noise is None:
        raise ValueError("noise_injection_finetune requires cfg.noise")
    tuned, report = train(model, train_data, val_data, cfg)
    if baseline_acc is not None:
        report.baseline_met = report.best_val_acc >= baseline_acc
    return tuned, report
