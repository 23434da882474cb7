"""Command-line harness composing the library into reproducible experiments.

One binary, subcommands `train`, `eval`, `calibrate`, `sweep`, `diagnose`,
`compare-nit`. Configuration comes from an optional `--config` file of
`section.key = value` lines plus repeatable `--set key=value` overrides; every
CSV embeds the fully resolved configuration as `#`-prefixed metadata, so a run
can be reproduced from its output alone. Exit codes: 0 success, 2 config
error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, nn
from .calibration import CalibrationConfig, calibrate, eval_with_dynamic_calibration
from .config import RunConfig, load_config
from .data import Dataset, load_cifar10_bin, load_mnist_idx, split_train_val, synthetic_blobs
from .diagnostics import CSV_COLUMNS as DIAG_COLUMNS
from .diagnostics import divergence_report
from .errors import ConfigError, PimnbError
from .model_io import FORMAT_VERSION, load_model, save_model
from .noise import NoiseSpec, instantiate_device
from .trainer import TrainConfig, noise_injection_finetune, train

SWEEP_COLUMNS = ("noise_kind", "eta0", "variant", "seed", "metric", "value")


# ---------------------------------------------------------------------------
# Output


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns, rows, cfg: RunConfig, command: str, extra_meta=None) -> None:
    lines = [
        f"# artifact_version={__version__}",
        f"# format_version={FORMAT_VERSION}",
        f"# command={command}",
        f"# config_sha256={cfg.sha256()}",
        f"# timestamp={datetime.now(timezone.utc).isoformat()}",
    ]
    for k, v in sorted((extra_meta or {}).items()):
        lines.append(f"# {k}={_fmt(v)}")
    for line in cfg.canonical_lines():
        lines.append(f"# config.{line}")
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Config-driven builders


def build_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Return (train, val, test) splits for the configured data source."""
    kind = cfg["data.kind"]
    seed = cfg["data.seed"]
    if kind == "synthetic":
        full = synthetic_blobs(
            cfg["data.n_per_class"], cfg["data.classes"], cfg["data.image_size"], seed
        )
        train_d, val_d = split_train_val(full, cfg["data.val_fraction"], seed)
        test_d = synthetic_blobs(
            max(cfg["data.n_per_class"] // 2, 1),
            cfg["data.classes"],
            cfg["data.image_size"],
            seed + 1,
            split="test",
        )
        return train_d, val_d, test_d
    root = cfg.data_root()
    if not root:
        raise ConfigError(f"data.path: required for data.kind={kind} (or set PIMNB_DATA_DIR)")
    rootp = Path(root)
    if kind == "mnist":
        names = {
            "train_images": "train-images-idx3-ubyte",
            "train_labels": "train-labels-idx1-ubyte",
            "test_images": "t10k-images-idx3-ubyte",
            "test_labels": "t10k-labels-idx1-ubyte",
        }
        paths = {}
        for k, base in names.items():
            p = rootp / base
            if not p.exists() and (rootp / (base + ".gz")).exists():
                p = rootp / (base + ".gz")
            if not p.exists():
                raise ConfigError(f"data.path: missing {base}[.gz] under {root}")
            paths[k] = p
        full = load_mnist_idx(paths["train_images"], paths["train_labels"])
        train_d, val_d = split_train_val(full, cfg["data.val_fraction"], seed)
        test_d = load_mnist_idx(paths["test_images"], paths["test_labels"])
        test_d.split = "test"
        return train_d, val_d, test_d
    if kind == "cifar10":
        batches = [rootp / f"data_batch_{i}.bin" for i in range(1, 6)]
        test_file = rootp / "test_batch.bin"
        missing = [str(p) for p in batches + [test_file] if not p.exists()]
        if missing:
            raise ConfigError(f"data.path: missing CIFAR-10 files {missing}")
        full = load_cifar10_bin(batches)
        train_d, val_d = split_train_val(full, cfg["data.val_fraction"], seed)
        test_d = load_cifar10_bin([test_file])
        test_d.split = "test"
        return train_d, val_d, test_d
    raise ConfigError(f"data.kind: unsupported {kind!r}")


def noise_spec(cfg: RunConfig, eta0=None, seed=None) -> NoiseSpec:
    return NoiseSpec(
        kind=cfg["noise.kind"],
        eta0=cfg["noise.eta0"] if eta0 is None else eta0,
        sigma_t_ratio=cfg["noise.sigma_t_ratio"],
        sigma_s=cfg["noise.sigma_s"],
        master_seed=cfg["noise.seed"] if seed is None else seed,
        temporal_granularity=cfg["noise.temporal_granularity"],
        noise_biases=cfg["noise.biases"],
    )


def calib_config(cfg: RunConfig, dynamic: bool | None = None) -> CalibrationConfig:
    return CalibrationConfig(
        momentum=cfg["calib.momentum"],
        passes=cfg["calib.passes"],
        batch_size=cfg["calib.batch_size"],
        dynamic=cfg["calib.dynamic"] if dynamic is None else dynamic,
        dynamic_scoring=cfg["calib.dynamic_scoring"],
    )


def train_config(cfg: RunConfig, with_noise: bool | None = None, eta0=None) -> TrainConfig:
    enabled = cfg["noise.enabled"] if with_noise is None else with_noise
    return TrainConfig(
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        lr=cfg["train.lr"],
        schedule=cfg["train.schedule"],
        momentum_sgd=cfg["train.sgd_momentum"],
        weight_decay=cfg["train.weight_decay"],
        seed=cfg["train.seed"],
        noise=noise_spec(cfg, eta0=eta0) if enabled else None,
    )


def _load_model_file(cfg: RunConfig, key: str = "model.path") -> nn.Model:
    path = cfg[key]
    if not path or not Path(path).exists():
        raise ConfigError(f"{key}: model file {path!r} not found")
    return load_model(path)


# ---------------------------------------------------------------------------
# Variant evaluation (shared by sweep and compare-nit)


def run_variant(
    variant: str,
    base_model: nn.Model,
    nit_model,
    spec: NoiseSpec,
    train_split: Dataset,
    test_split: Dataset,
    calcfg: CalibrationConfig,
    eval_batch_size: int,
) -> float:
    if variant == "vanilla":
        device = instantiate_device(base_model, spec)
        return nn.evaluate(base_model, test_split, eval_batch_size, device).accuracy
    if variant == "nabn":
        m = base_model.copy()
        device = instantiate_device(m, spec)
        calibrate(m, device, train_split, replace(calcfg, dynamic=False))
        return nn.evaluate(m, test_split, eval_batch_size, device).accuracy
    if variant == "nabn_dynamic":
        m = base_model.copy()
        device = instantiate_device(m, spec)
        calibrate(m, device, train_split, replace(calcfg, dynamic=False))
        res, _ = eval_with_dynamic_calibration(m, device, test_split, replace(calcfg, dynamic=True))
        return res.accuracy
    if variant == "nit":
        if nit_model is None:
            raise ConfigError("sweep.nit_model: required for the nit variant")
        device = instantiate_device(nit_model, spec)
        return nn.evaluate(nit_model, test_split, eval_batch_size, device).accuracy
    raise ConfigError(f"sweep.variants: unknown variant {variant!r}")


# ---------------------------------------------------------------------------
# Commands


def cmd_train(cfg: RunConfig, out: str) -> int:
    train_d, val_d, _ = build_datasets(cfg)
    model = nn.PRESETS[cfg["model.preset"]](
        in_channels=train_d.channels,
        num_classes=max(train_d.num_classes, 2),
        seed=cfg["train.seed"],
    )
    tcfg = train_config(cfg)
    if tcfg.noise is not None:
        model, report = noise_injection_finetune(model, train_d, val_d, tcfg)
    else:
        model, report = train(model, train_d, val_d, tcfg)
    save_model(model, cfg["model.path"])
    write_csv(
        out,
        ("epoch", "train_loss", "train_acc", "val_acc"),
        report.to_csv_rows(),
        cfg,
        "train",
        extra_meta={
            "model_path": cfg["model.path"],
            "best_epoch": report.best_epoch,
            "best_val_acc": report.best_val_acc,
            "wall_seconds": round(report.wall_seconds, 3),
        },
    )
    print(f"trained {cfg['model.path']}: best val acc {report.best_val_acc:.4f} "
          f"(epoch {report.best_epoch}); report -> {out}")
    return 0


def cmd_eval(cfg: RunConfig, out: str) -> int:
    model = _load_model_file(cfg)
    _, _, test_d = build_datasets(cfg)
    device = None
    if cfg["noise.enabled"]:
        device = instantiate_device(model, noise_spec(cfg))
    res = nn.evaluate(model, test_d, cfg["sweep.eval_batch_size"], device)
    write_csv(
        out,
        ("noise_kind", "eta0", "variant", "seed", "metric", "value"),
        [(cfg["noise.kind"], cfg["noise.eta0"] if device else 0.0,
          "vanilla", cfg["noise.seed"], "accuracy", res.accuracy)],
        cfg,
        "eval",
    )
    print(f"accuracy {res.accuracy:.4f} ({res.correct}/{res.num_samples}); -> {out}")
    return 0


def cmd_calibrate(cfg: RunConfig, out: str) -> int:
    model = _load_model_file(cfg)
    train_d, _, test_d = build_datasets(cfg)
    device = instantiate_device(model, noise_spec(cfg))
    before = nn.evaluate(model, test_d, cfg["sweep.eval_batch_size"], device).accuracy
    calibrated = model.copy()
    calibrate(calibrated, device, train_d, calib_config(cfg, dynamic=False))
    after = nn.evaluate(calibrated, test_d, cfg["sweep.eval_batch_size"], device).accuracy
    out_model = str(Path(cfg["model.path"]).with_suffix(".calibrated.pimn"))
    save_model(calibrated, out_model)
    write_csv(
        out,
        SWEEP_COLUMNS,
        [
            (cfg["noise.kind"], cfg["noise.eta0"], "vanilla", cfg["noise.seed"], "accuracy", before),
            (cfg["noise.kind"], cfg["noise.eta0"], "nabn", cfg["noise.seed"], "accuracy", after),
        ],
        cfg,
        "calibrate",
        extra_meta={"calibrated_model": out_model},
    )
    print(f"accuracy {before:.4f} -> {after:.4f} after calibration; model -> {out_model}")
    return 0


def cmd_sweep(cfg: RunConfig, out: str) -> int:
    scales = cfg["sweep.scales"]
    if not scales:
        raise ConfigError("sweep.scales: must be non-empty")
    model = _load_model_file(cfg)
    nit_model = None
    if "nit" in cfg["sweep.variants"]:
        if not cfg["sweep.nit_model"]:
            raise ConfigError("sweep.nit_model: required when the nit variant is requested")
        nit_model = _load_model_file(cfg, "sweep.nit_model")
    train_d, _, test_d = build_datasets(cfg)
    calcfg = calib_config(cfg)
    rows = []
    for eta0 in scales:
        for variant in cfg["sweep.variants"]:
            for seed in cfg["sweep.seeds"]:
                acc = run_variant(
                    variant, model, nit_model, noise_spec(cfg, eta0=eta0, seed=seed),
                    train_d, test_d, calcfg, cfg["sweep.eval_batch_size"],
                )
                rows.append((cfg["noise.kind"], eta0, variant, seed, "accuracy", acc))
    write_csv(out, SWEEP_COLUMNS, rows, cfg, "sweep")
    print(f"{len(rows)} sweep rows -> {out}")
    return 0


def cmd_diagnose(cfg: RunConfig, out: str) -> int:
    model = _load_model_file(cfg)
    train_d, _, test_d = build_datasets(cfg)
    device = instantiate_device(model, noise_spec(cfg))
    rows = divergence_report(
        model,
        device,
        test_d,
        calibrated=True,
        calib_data=train_d,
        calib_cfg=calib_config(cfg, dynamic=False),
        bins=cfg["diag.bins"],
        smoothing=cfg["diag.smoothing"],
        batch_size=cfg["diag.batch_size"],
    )
    write_csv(
        out,
        DIAG_COLUMNS,
        [tuple(getattr(r, c) for c in DIAG_COLUMNS) for r in rows],
        cfg,
        "diagnose",
    )
    print(f"{len(rows)} BatchNorm layers diagnosed -> {out}")
    return 0


def cmd_compare_nit(cfg: RunConfig, out: str) -> int:
    scales = cfg["sweep.scales"]
    if not scales:
        raise ConfigError("sweep.scales: must be non-empty")
    model = _load_model_file(cfg)
    if not cfg["sweep.nit_model"]:
        raise ConfigError("sweep.nit_model: required for compare-nit")
    nit_model = _load_model_file(cfg, "sweep.nit_model")
    train_d, _, test_d = build_datasets(cfg)
    calcfg = calib_config(cfg)
    rows = []
    means: dict[str, list[float]] = {"nit": [], "nabn_dynamic": []}
    for eta0 in scales:
        for variant in ("nit", "nabn_dynamic"):
            accs = []
            for seed in cfg["sweep.seeds"]:
                acc = run_variant(
                    variant, model, nit_model, noise_spec(cfg, eta0=eta0, seed=seed),
                    train_d, test_d, calcfg, cfg["sweep.eval_batch_size"],
                )
                rows.append((cfg["noise.kind"], eta0, variant, seed, "accuracy", acc))
                accs.append(acc)
            means[variant].append(float(np.mean(accs)))
    spreads = {v: (max(a) - min(a) if a else 0.0) for v, a in means.items()}
    write_csv(
        out,
        SWEEP_COLUMNS,
        rows,
        cfg,
        "compare-nit",
        extra_meta={
            "spread_nit": spreads["nit"],
            "spread_nabn_dynamic": spreads["nabn_dynamic"],
            "nit_scale": cfg["sweep.nit_scale"],
        },
    )
    print(
        f"spread(nit)={spreads['nit']:.4f} spread(nabn_dynamic)={spreads['nabn_dynamic']:.4f} -> {out}"
    )
    return 0


# ---------------------------------------------------------------------------
# Entry point


_COMMANDS = {
    "train": (cmd_train, "train_report.csv"),
    "eval": (cmd_eval, "eval.csv"),
    "calibrate": (cmd_calibrate, "calibrate.csv"),
    "sweep": (cmd_sweep, "sweep.csv"),
    "diagnose": (cmd_diagnose, "diagnose.csv"),
    "compare-nit": (cmd_compare_nit, "compare_nit.csv"),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pimnb",
        description="Analog weight-noise simulator with noise-aware BatchNorm calibration",
    )
    parser.add_argument("--version", action="store_true", help="print versions and exit")
    sub = parser.add_subparsers(dest="command")
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="path to a section.key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--out", default=None, help="output CSV path")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.version:
        print(f"pimnb {__version__} (model format v{FORMAT_VERSION})")
        return 0
    if not args.command:
        _build_parser().print_usage(sys.stderr)
        return 2
    fn, default_out = _COMMANDS[args.command]
    try:
        cfg = load_config(args.config, args.set)
        return fn(cfg, args.out or default_out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except PimnbError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
