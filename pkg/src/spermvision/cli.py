"""Command-line pipeline driver.

Subcommands: synth, train-ae, train-reg, crossval, report. Exit codes:
0 success, 1 runtime failure, 2 usage or config error. All outputs are
written atomically (temp file + rename), and ``--deterministic`` trades
speed for bit-reproducibility (deterministic kernels, one thread).
"""

from __future__ import annotations

import argparse
import random
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import yaml

from . import autoencoder as ae
from . import regressor as rg
from .core import DataError, InputStackSpec, TaskKind, derive_seed, load_folds, load_labels
from .checkpoint import CheckpointError
from .evaluation import (
    ExperimentConfig,
    MetricsReport,
    ReportError,
    load_report_json,
    render_report,
    report_to_csv,
    run_cross_validation,
    write_report_json,
)
from .ingestion import SamplingMode, SamplingPlan, probe_video, resolve_video_path
from .synthgen import SynthParams, generate_dataset, write_dataset


class UsageError(Exception):
    """Bad arguments or config; maps to exit code 2."""


def _seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def _apply_determinism() -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def _parse_spec(name: str) -> InputStackSpec:
    try:
        return InputStackSpec.parse(name)
    except DataError as exc:
        raise UsageError(str(exc)) from None


def _parse_task(name: str) -> TaskKind:
    try:
        return TaskKind.parse(name)
    except DataError as exc:
        raise UsageError(str(exc)) from None


def _require_dataset(data_dir: Path) -> tuple[Path, Path]:
    labels = data_dir / "labels.csv"
    folds = data_dir / "folds.csv"
    if not labels.exists():
        raise UsageError(f"labels file not found: {labels}")
    if not folds.exists():
        raise UsageError(f"folds file not found: {folds}")
    return labels, folds


def cmd_synth(args) -> int:
    if args.videos < 3:
        raise UsageError(f"--videos must be >= 3 (three-fold split), got {args.videos}")
    template = SynthParams(
        n_particles=args.particles,
        n_frames=args.frames,
        frame_size=args.frame_size,
        speed_px_per_frame=args.speed,
        jitter_px=args.jitter,
        noise_sigma=args.noise_sigma,
    )
    videos, labels, split = generate_dataset(args.videos, template, args.seed)
    write_dataset(args.out, videos, labels, split, container=args.container)
    print(f"wrote {len(videos)} videos + labels.csv + folds.csv to {args.out}")
    return 0


def _ae_config_from_args(args, spec: InputStackSpec) -> ae.AutoencoderConfig:
    return ae.AutoencoderConfig(
        spec=spec,
        feature_channels=args.feature_channels,
        hidden_widths=tuple(int(w) for w in args.hidden_widths.split(",")),
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        rng_seed=args.seed,
    )


def cmd_train_ae(args) -> int:
    data_dir = Path(args.data)
    labels_file, _ = _require_dataset(data_dir)
    spec = _parse_spec(args.spec)
    if args.deterministic:
        _apply_determinism()
    _seed_everything(args.seed)
    config = _ae_config_from_args(args, spec)

    labels = load_labels(labels_file)
    plan = SamplingPlan(
        stacks_per_video=args.stacks_per_video,
        rng_seed=derive_seed(args.seed, "train-ae"),
        mode=SamplingMode.UNIFORM_RANDOM_START,
    )
    from .ingestion import sample_stacks

    stacks = []
    for video_id in sorted(labels):
        source = probe_video(resolve_video_path(data_dir, video_id), video_id)
        stacks.extend(sample_stacks(source, spec, plan, args.frame_size))
    model = ae.build_autoencoder(config)
    ae.train_autoencoder(model, stacks)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ae.export_encoder(model, out)
    ae.save_loss_history(out.with_suffix(".loss.csv"), model.loss_history)
    final = model.loss_history[-1][1]
    print(f"trained {spec.name} autoencoder for {len(model.loss_history)} epochs, final MSE {final:.6f}")
    print(f"encoder checkpoint: {out}")
    return 0


def cmd_train_reg(args) -> int:
    data_dir = Path(args.data)
    labels_file, _ = _require_dataset(data_dir)
    task = _parse_task(args.task)
    if args.deterministic:
        _apply_determinism()
    _seed_everything(args.seed)

    encoder = ae.import_encoder(args.encoder)
    if args.spec is not None and _parse_spec(args.spec) is not encoder.config.spec:
        raise UsageError(
            f"encoder checkpoint was trained for {encoder.config.spec.name}, but --spec {args.spec} was requested"
        )
    config = rg.RegressorConfig(
        task=task,
        backbone=args.backbone,
        input_channels=encoder.config.feature_channels,
        freeze_encoder=not args.finetune_encoder,
        loss=args.loss,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        rng_seed=args.seed,
    )

    from .core import select_target
    from .ingestion import sample_stacks

    labels = load_labels(labels_file)
    plan = SamplingPlan(
        stacks_per_video=args.stacks_per_video,
        rng_seed=derive_seed(args.seed, "train-reg"),
        mode=SamplingMode.UNIFORM_RANDOM_START,
    )
    dataset = []
    for video_id in sorted(labels):
        source = probe_video(resolve_video_path(data_dir, video_id), video_id)
        for stack in sample_stacks(source, encoder.config.spec, plan, args.frame_size):
            dataset.append((stack, select_target(labels[video_id], task)))
    regressor = rg.build_regressor(config)
    rg.train_regressor(encoder, regressor, dataset)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rg.export_regressor(regressor, out)
    final = regressor.loss_history[-1][1]
    print(f"trained {task.value} regressor for {len(regressor.loss_history)} epochs, final {config.loss} {final:.4f}")
    print(f"regressor checkpoint: {out}")
    return 0


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        payload = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise UsageError(f"config file {p} is not valid YAML: {exc}") from None
    if payload is None:
        return {}
    if not isinstance(payload, dict):
        raise UsageError(f"config file {p} must hold a mapping at top level")
    return payload


def _setting(args, config: dict, name: str, default):
    """Flag wins over config file wins over default."""
    value = getattr(args, name, None)
    if value is not None:
        return value
    if name in config:
        return config[name]
    return default


def cmd_crossval(args) -> int:
    config_file = _load_config_file(args.config)
    data_dir = Path(_setting(args, config_file, "data", None) or ".")
    labels_file, folds_file = _require_dataset(data_dir)
    out_dir = Path(_setting(args, config_file, "out", "crossval_out"))
    seed = int(_setting(args, config_file, "seed", 0))
    deterministic = bool(args.deterministic or config_file.get("deterministic", False))
    specs = [_parse_spec(s) for s in str(_setting(args, config_file, "specs", "I1,I2,I3,I4")).split(",")]
    tasks = [_parse_task(t) for t in str(_setting(args, config_file, "tasks", "motility,morphology")).split(",")]
    frame_size = int(_setting(args, config_file, "frame_size", 256))
    stacks_per_video = int(_setting(args, config_file, "stacks_per_video", 4))
    eval_stacks = int(_setting(args, config_file, "eval_stacks", stacks_per_video))
    feature_channels = int(_setting(args, config_file, "feature_channels", 3))
    hidden_widths = tuple(int(w) for w in str(_setting(args, config_file, "hidden_widths", "64,32")).split(","))
    ae_epochs = int(_setting(args, config_file, "ae_epochs", 2000))
    reg_epochs = int(_setting(args, config_file, "reg_epochs", 100))
    batch_size = int(_setting(args, config_file, "batch_size", 16))
    lr = float(_setting(args, config_file, "lr", 1e-3))
    backbone = str(_setting(args, config_file, "backbone", "resnet34_pretrained"))
    ae_on_all_folds = bool(config_file.get("ae_on_all_folds", False) or args.ae_on_all_folds)

    if deterministic:
        _apply_determinism()
    _seed_everything(seed)

    reports = []
    for spec in specs:
        for task in tasks:
            exp = ExperimentConfig(
                videos_dir=data_dir,
                labels_file=labels_file,
                folds_file=folds_file,
                output_dir=out_dir,
                spec=spec,
                task=task,
                autoencoder=ae.AutoencoderConfig(
                    spec=spec,
                    feature_channels=feature_channels,
                    hidden_widths=hidden_widths,
                    epochs=ae_epochs,
                    batch_size=batch_size,
                    learning_rate=lr,
                    rng_seed=seed,
                ),
                regressor=rg.RegressorConfig(
                    task=task,
                    backbone=backbone,
                    input_channels=feature_channels,
                    epochs=reg_epochs,
                    batch_size=batch_size,
                    learning_rate=lr,
                    rng_seed=seed,
                ),
                train_plan=SamplingPlan(stacks_per_video, seed, SamplingMode.UNIFORM_RANDOM_START),
                eval_plan=SamplingPlan(eval_stacks, seed, SamplingMode.EVENLY_SPACED),
                frame_size=frame_size,
                rng_seed=seed,
                deterministic=deterministic,
                ae_on_all_folds=ae_on_all_folds,
            )
            print(f"cross-validating {spec.name} / {task.value} ...", flush=True)
            reports.append(run_cross_validation(exp))

    merged = MetricsReport.merge(reports)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report_json(merged, out_dir / "report.json")
    table = render_report(merged)
    from .core import atomic_write_text

    atomic_write_text(out_dir / "report.txt", table)
    print(table, end="")
    print(f"reports written to {out_dir}")
    return 0


def cmd_report(args) -> int:
    report = load_report_json(args.report)
    if args.format == "csv":
        output = report_to_csv(report)
    else:
        output = render_report(report)
    if args.out:
        from .core import atomic_write_text

        atomic_write_text(Path(args.out), output)
        print(f"wrote {args.out}")
    else:
        print(output, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spermvision", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with exactly known labels")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--videos", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--frame-size", dest="frame_size", type=int, default=64)
    p.add_argument("--particles", type=int, default=12)
    p.add_argument("--speed", type=float, default=1.5)
    p.add_argument("--jitter", type=float, default=1.0)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=0.02)
    p.add_argument("--container", choices=("frames", "avi"), default="frames")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-ae", help="train an autoencoder and export the encoder checkpoint")
    p.add_argument("--data", required=True, help="dataset directory (labels.csv, folds.csv, videos)")
    p.add_argument("--spec", required=True, help="input spec: I1, I2, I3 or I4")
    p.add_argument("--out", required=True, help="encoder checkpoint path")
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feature-channels", dest="feature_channels", type=int, default=3)
    p.add_argument("--hidden-widths", dest="hidden_widths", default="64,32")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--frame-size", dest="frame_size", type=int, default=256)
    p.add_argument("--stacks-per-video", dest="stacks_per_video", type=int, default=4)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("train-reg", help="train a regressor on top of an exported encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--encoder", required=True, help="encoder checkpoint from train-ae")
    p.add_argument("--task", required=True, choices=("motility", "morphology"))
    p.add_argument("--spec", default=None, help="optional check against the encoder's spec")
    p.add_argument("--out", required=True, help="regressor checkpoint path")
    p.add_argument("--backbone", choices=rg.BACKBONES, default="resnet34_pretrained")
    p.add_argument("--loss", choices=rg.LOSSES, default="l1")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--frame-size", dest="frame_size", type=int, default=256)
    p.add_argument("--stacks-per-video", dest="stacks_per_video", type=int, default=4)
    p.add_argument("--finetune-encoder", dest="finetune_encoder", action="store_true")
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_train_reg)

    p = sub.add_parser("crossval", help="run three-fold cross-validation over specs x tasks")
    p.add_argument("--config", default=None, help="YAML config file; flags override it")
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--specs", default=None, help="comma-separated, e.g. I1,I4")
    p.add_argument("--tasks", default=None, help="comma-separated, e.g. motility")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--frame-size", dest="frame_size", type=int, default=None)
    p.add_argument("--stacks-per-video", dest="stacks_per_video", type=int, default=None)
    p.add_argument("--eval-stacks", dest="eval_stacks", type=int, default=None)
    p.add_argument("--feature-channels", dest="feature_channels", type=int, default=None)
    p.add_argument("--hidden-widths", dest="hidden_widths", default=None)
    p.add_argument("--ae-epochs", dest="ae_epochs", type=int, default=None)
    p.add_argument("--reg-epochs", dest="reg_epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--backbone", choices=rg.BACKBONES, default=None)
    p.add_argument("--ae-on-all-folds", dest="ae_on_all_folds", action="store_true")
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("report", help="render a machine-readable report")
    p.add_argument("--report", required=True, help="report.json produced by crossval")
    p.add_argument("--format", choices=("table", "csv"), default="table")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
