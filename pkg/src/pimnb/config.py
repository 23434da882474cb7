"""Run configuration: `section.key = value` files plus CLI overrides.

Every key is declared in a registry with a type and default; unknown keys are
hard errors so typos cannot silently fall back to defaults. The fully resolved
configuration is embedded in every output's metadata together with its hash.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path
from typing import Any

from .errors import ConfigError

DATA_DIR_ENV = "PIMNB_DATA_DIR"


def _parse_bool(key: str, raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def _parse_scalar(key: str, kind: str, raw: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {raw!r}") from None
    if kind == "bool":
        return _parse_bool(key, raw)
    return raw


def _parse_value(key: str, kind: str, raw: str):
    if kind.endswith("_list"):
        inner = kind[: -len("_list")]
        items = [s for s in (p.strip() for p in raw.split(",")) if s]
        if not items:
            raise ConfigError(f"{key}: expected a non-empty comma-separated list")
        return [_parse_scalar(key, inner, s) for s in items]
    return _parse_scalar(key, kind, raw)


# key -> (type, default, allowed values or None)
KEY_REGISTRY: dict[str, tuple[str, Any, Any]] = {
    "data.kind": ("str", "synthetic", {"synthetic", "mnist", "cifar10"}),
    "data.path": ("str", "", None),  # empty -> PIMNB_DATA_DIR
    "data.seed": ("int", 0, None),
    "data.classes": ("int", 3, None),
    "data.n_per_class": ("int", 512, None),
    "data.image_size": ("int", 16, None),
    "data.val_fraction": ("float", 0.1, None),
    "model.preset": ("str", "reference", {"reference"}),
    "model.path": ("str", "model.pimn", None),
    "train.epochs": ("int", 30, None),
    "train.batch_size": ("int", 32, None),
    "train.lr": ("float", 0.05, None),
    "train.schedule": ("str", "cosine", {"cosine", "constant"}),
    "train.sgd_momentum": ("float", 0.9, None),
    "train.weight_decay": ("float", 0.0, None),
    "train.seed": ("int", 0, None),
    "noise.enabled": ("bool", False, None),
    "noise.kind": ("str", "mul", {"mul", "add"}),
    "noise.eta0": ("float", 0.0, None),
    "noise.sigma_t_ratio": ("float", 0.2, None),
    "noise.sigma_s": ("float", 0.1, None),
    "noise.seed": ("int", 0, None),
    "noise.temporal_granularity": ("str", "global", {"global", "per_layer"}),
    "noise.biases": ("bool", False, None),
    "calib.momentum": ("float", 0.999, None),
    "calib.passes": ("int", 1, None),
    "calib.batch_size": ("int", 64, None),
    "calib.dynamic": ("bool", False, None),
    "calib.dynamic_scoring": ("str", "pre_update", {"pre_update", "batch_stats"}),
    "diag.bins": ("int", 256, None),
    "diag.smoothing": ("float", 1.0, None),
    "diag.batch_size": ("int", 256, None),
    "sweep.scales": ("float_list", [0.02, 0.04, 0.06, 0.08, 0.10], None),
    "sweep.seeds": ("int_list", [0, 1, 2], None),
    "sweep.variants": ("str_list", ["vanilla", "nabn"], None),
    "sweep.nit_scale": ("float", 0.06, None),
    "sweep.nit_model": ("str", "", None),
    "sweep.eval_batch_size": ("int", 256, None),
}

_SWEEP_VARIANTS = ("vanilla", "nabn", "nabn_dynamic", "nit")


class RunConfig:
    """Resolved configuration: registry defaults, file values, then overrides."""

    def __init__(self, values: dict[str, Any]):
        self.values = values

    def __getitem__(self, key: str):
        try:
            return self.values[key]
        except KeyError:
            raise ConfigError(f"unknown config key {key!r}") from None

    def data_root(self) -> str:
        path = self["data.path"]
        if not path:
            path = os.environ.get(DATA_DIR_ENV, "")
        return path

    def canonical_lines(self) -> list[str]:
        lines = []
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, list):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{key} = {v}")
        return lines

    def sha256(self) -> str:
        return hashlib.sha256("\n".join(self.canonical_lines()).encode()).hexdigest()


def _set_key(values: dict[str, Any], key: str, raw: str, origin: str) -> None:
    if key not in KEY_REGISTRY:
        raise ConfigError(f"unknown config key {key!r} ({origin})")
    kind, _, allowed = KEY_REGISTRY[key]
    value = _parse_value(key, kind, raw)
    if allowed is not None:
        items = value if isinstance(value, list) else [value]
        for item in items:
            if item not in allowed:
                raise ConfigError(f"{key}: {item!r} not in {sorted(allowed)} ({origin})")
    values[key] = value


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Parse an optional config file and `key=value` override strings."""
    values = {k: (list(d) if isinstance(d, list) else d) for k, (_, d, _) in KEY_REGISTRY.items()}
    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'section.key = value', got {line!r}")
            key, raw = stripped.split("=", 1)
            _set_key(values, key.strip(), raw, f"{path}:{lineno}")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_key(values, key.strip(), raw, "--set")

    cfg = RunConfig(values)
    for v in cfg["sweep.variants"]:
        if v not in _SWEEP_VARIANTS:
            raise ConfigError(f"sweep.variants: {v!r} not in {_SWEEP_VARIANTS}")
    return cfg
