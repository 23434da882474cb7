"""Binary model file format.

Little-endian layout:

    magic "PIMN" | version u32 | layer_count u32
    per layer:
        kind u8
        kind-specific u32 hyperparameters
        parameter tensors (rank u32, dims u32 each, raw f32 data)
        BatchNorm layers additionally: running_mean, running_var, gamma, beta
        (same tensor encoding), then epsilon f64 and training momentum f64
    crc32 u32 over all preceding bytes

Round-trips are bit-exact for every parameter and statistic.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumError, MagicError, ModelFormatError, TruncationError, VersionError
from .nn import (
    BatchNorm2d,
    BNStats,
    Conv2d,
    Flatten,
    GlobalAvgPool,
    Linear,
    MaxPool2d,
    Model,
    ReLU,
)
from .tensor import Tensor

MAGIC = b"PIMN"
FORMAT_VERSION = 1

_KIND_CONV, _KIND_LINEAR, _KIND_BN, _KIND_RELU, _KIND_MAXPOOL, _KIND_GAP, _KIND_FLATTEN = range(7)


def _pack_tensor(out: bytearray, arr: np.ndarray) -> None:
    out += struct.pack("<I", arr.ndim)
    out += struct.pack(f"<{arr.ndim}I", *arr.shape)
    out += np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_model(model: Model, path) -> None:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", FORMAT_VERSION, len(model.layers))
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Conv2d):
            out += struct.pack(
                "<BIIIIII",
                _KIND_CONV,
                layer.in_ch,
                layer.out_ch,
                layer.kernel,
                layer.stride,
                layer.padding,
                int(layer.has_bias),
            )
            _pack_tensor(out, model.params[i]["weight"].array)
            if layer.has_bias:
                _pack_tensor(out, model.params[i]["bias"].array)
        elif isinstance(layer, Linear):
            out += struct.pack("<BIII", _KIND_LINEAR, layer.in_dim, layer.out_dim, int(layer.has_bias))
            _pack_tensor(out, model.params[i]["weight"].array)
            if layer.has_bias:
                _pack_tensor(out, model.params[i]["bias"].array)
        elif isinstance(layer, BatchNorm2d):
            out += struct.pack("<BI", _KIND_BN, layer.channels)
            stats = model.bn_states[i]
            for arr in (stats.running_mean, stats.running_var, stats.gamma, stats.beta):
                _pack_tensor(out, arr)
            out += struct.pack("<ff", stats.epsilon, stats.momentum)
        elif isinstance(layer, ReLU):
            out += struct.pack("<B", _KIND_RELU)
        elif isinstance(layer, MaxPool2d):
            out += struct.pack("<BII", _KIND_MAXPOOL, layer.kernel, layer.stride)
        elif isinstance(layer, GlobalAvgPool):
            out += struct.pack("<B", _KIND_GAP)
        elif isinstance(layer, Flatten):
            out += struct.pack("<B", _KIND_FLATTEN)
        else:
            raise ModelFormatError(f"cannot serialize layer {layer!r}")
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    Path(path).write_bytes(bytes(out))


class _Cursor:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncationError(
                f"needed {n} bytes at offset {self.pos}, file has {len(self.raw)}"
            )
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.read(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.read(4))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self.read(4))[0]

    def tensor_array(self) -> np.ndarray:
        rank = self.u32()
        if rank < 1 or rank > 8:
            raise ModelFormatError(f"implausible tensor rank {rank} at offset {self.pos}")
        dims = struct.unpack(f"<{rank}I", self.read(4 * rank))
        count = 1
        for d in dims:
            if d < 1:
                raise ModelFormatError(f"tensor dim {d} < 1 at offset {self.pos}")
            count *= d
        data = np.frombuffer(self.read(4 * count), dtype="<f4")
        return data.reshape(dims).astype(np.float32)


def load_model(path) -> Model:
    raw = Path(path).read_bytes()
    cur = _Cursor(raw)
    if cur.read(4) != MAGIC:
        raise MagicError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version = cur.u32()
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version}, expected {FORMAT_VERSION}")
    layer_count = cur.u32()

    layers = []
    params: dict[int, dict[str, Tensor]] = {}
    bn_states: dict[int, BNStats] = {}
    for i in range(layer_count):
        kind = cur.u8()
        if kind == _KIND_CONV:
            in_ch, out_ch, kernel, stride, padding, has_bias = (cur.u32() for _ in range(6))
            layers.append(Conv2d(in_ch, out_ch, kernel, stride, padding, bool(has_bias)))
            p = {"weight": Tensor._wrap(cur.tensor_array())}
            if has_bias:
                p["bias"] = Tensor._wrap(cur.tensor_array())
            params[i] = p
        elif kind == _KIND_LINEAR:
            in_dim, out_dim, has_bias = cur.u32(), cur.u32(), cur.u32()
            layers.append(Linear(in_dim, out_dim, bool(has_bias)))
            p = {"weight": Tensor._wrap(cur.tensor_array())}
            if has_bias:
                p["bias"] = Tensor._wrap(cur.tensor_array())
            params[i] = p
        elif kind == _KIND_BN:
            channels = cur.u32()
            rm, rv, gamma, beta = (cur.tensor_array() for _ in range(4))
            epsilon = cur.f32()
            momentum = cur.f32()
            layers.append(BatchNorm2d(channels, float(epsilon)))
            bn_states[i] = BNStats(rm, rv, gamma, beta, float(epsilon), float(momentum))
        elif kind == _KIND_RELU:
            layers.append(ReLU())
        elif kind == _KIND_MAXPOOL:
            layers.append(MaxPool2d(cur.u32(), cur.u32()))
        elif kind == _KIND_GAP:
            layers.append(GlobalAvgPool())
        elif kind == _KIND_FLATTEN:
            layers.append(Flatten())
        else:
            raise ModelFormatError(f"unknown layer kind {kind} at offset {cur.pos - 1}")

    stored_crc = cur.u32()
    if cur.pos != len(raw):
        raise ModelFormatError(f"{len(raw) - cur.pos} trailing bytes after checksum")
    actual_crc = zlib.crc32(raw[: len(raw) - 4])
    if stored_crc != actual_crc:
        raise ChecksumError(f"crc32 mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}")
    return Model(layers, params, bn_states)
