"""MAE metric, three-fold cross-validation, and tabular reporting.

Per-fold MAE is computed over per-video predictions (labels are per-video).
Display rounding is half-away-from-zero to 3 decimals; the machine-readable
JSON report keeps full precision and embeds a sha256 over its canonical
payload so corruption is detectable on load.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autoencoder import AutoencoderConfig, build_autoencoder, train_autoencoder
from .core import (
    FoldSplit,
    InputStackSpec,
    SemenLabels,
    TaskKind,
    ValidationError,
    atomic_write_text,
    derive_seed,
    load_folds,
    load_labels,
    select_target,
)
from .ingestion import SamplingMode, SamplingPlan, VideoSource, decode_video, probe_video, resolve_video_path, sample_stacks
from .regressor import RegressorConfig, build_regressor, predict_video, train_regressor

REPORT_VERSION = 1
FOLDS = (1, 2, 3)


class CrossValidationError(RuntimeError):
    """A cross-validation stage failed; the message names the failing (spec, task, fold)."""


class ReportError(RuntimeError):
    """A report file is missing, corrupt, or incomplete."""


def mae(predictions: Sequence[tuple[float, float, float]], targets: Sequence[tuple[float, float, float]]) -> float:
    """Mean over all samples and all three components of |prediction - target|."""
    if len(predictions) != len(targets):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(targets)} targets")
    if not predictions:
        raise ValueError("mae needs at least one sample")
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"expected matching (n, 3) triples, got {p.shape} and {t.shape}")
    if not (np.isfinite(p).all() and np.isfinite(t).all()):
        raise ValueError("mae inputs must be finite")
    return float(np.mean(np.abs(p - t)))


def average_folds(fold_maes: Sequence[float]) -> float:
    """Arithmetic mean of exactly three per-fold MAE values."""
    if len(fold_maes) != 3:
        raise ValueError(f"expected exactly 3 fold values, got {len(fold_maes)}")
    values = [float(v) for v in fold_maes]
    if not all(np.isfinite(v) for v in values):
        raise ValueError("fold MAE values must be finite")
    return float(np.mean(values))


def format_metric(value: float) -> str:
    """Render to 3 decimals, rounding half away from zero (13.0167 -> '13.017')."""
    return str(Decimal(repr(float(value))).quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class FoldResult:
    fold: int
    task: TaskKind
    spec: InputStackSpec
    mae: float
    n_videos: int

    def __post_init__(self):
        if self.fold not in FOLDS:
            raise ValidationError(f"fold must be in {FOLDS}, got {self.fold}")
        if not np.isfinite(self.mae) or self.mae < 0:
            raise ValidationError(f"mae must be finite and >= 0, got {self.mae}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one cross-validation run needs; nested configs must agree."""

    videos_dir: Path
    labels_file: Path
    folds_file: Path
    output_dir: Path
    spec: InputStackSpec
    task: TaskKind
    autoencoder: AutoencoderConfig
    regressor: RegressorConfig
    train_plan: SamplingPlan
    eval_plan: SamplingPlan
    frame_size: int = 256
    rng_seed: int = 0
    deterministic: bool = False
    ae_on_all_folds: bool = False
    weights_cache: Path | None = None

    def __post_init__(self):
        for name in ("videos_dir", "labels_file", "folds_file", "output_dir"):
            object.__setattr__(self, name, Path(getattr(self, name)))
        if self.autoencoder.spec is not self.spec:
            raise ValidationError(
                f"autoencoder config is for {self.autoencoder.spec.name}, experiment wants {self.spec.name}"
            )
        if self.regressor.input_channels != self.autoencoder.feature_channels:
            raise ValidationError(
                f"regressor expects {self.regressor.input_channels} input channels but the encoder "
                f"produces {self.autoencoder.feature_channels}"
            )
        if self.regressor.task is not self.task:
            raise ValidationError(f"regressor task {self.regressor.task.value} != experiment task {self.task.value}")
        if self.frame_size <= 0:
            raise ValidationError("frame_size must be > 0")

    def to_dict(self) -> dict:
        return {
            "videos_dir": str(self.videos_dir),
            "labels_file": str(self.labels_file),
            "folds_file": str(self.folds_file),
            "output_dir": str(self.output_dir),
            "weights_cache": None if self.weights_cache is None else str(self.weights_cache),
            "spec": self.spec.name,
            "task": self.task.value,
            "autoencoder": self.autoencoder.to_dict(),
            "regressor": self.regressor.to_dict(),
            "train_plan": {
                "stacks_per_video": self.train_plan.stacks_per_video,
                "rng_seed": self.train_plan.rng_seed,
                "mode": self.train_plan.mode.value,
            },
            "eval_plan": {
                "stacks_per_video": self.eval_plan.stacks_per_video,
                "rng_seed": self.eval_plan.rng_seed,
                "mode": self.eval_plan.mode.value,
            },
            "frame_size": self.frame_size,
            "rng_seed": self.rng_seed,
            "deterministic": self.deterministic,
            "ae_on_all_folds": self.ae_on_all_folds,
        }


@dataclass
class MetricsReport:
    """Fold results plus (spec, task) averages for the coverage declared in specs/tasks."""

    results: tuple[FoldResult, ...]
    averages: dict[tuple[InputStackSpec, TaskKind], float]
    specs: tuple[InputStackSpec, ...]
    tasks: tuple[TaskKind, ...]
    seed: int = 0
    deterministic: bool = False
    config_echo: dict = field(default_factory=dict)
    isolation: dict[str, list[str]] = field(default_factory=dict)
    created_at: str | None = None

    def fold_mae(self, spec: InputStackSpec, task: TaskKind, fold: int) -> float:
        for r in self.results:
            if r.spec is spec and r.task is task and r.fold == fold:
                return r.mae
        raise KeyError(f"no result for {spec.name}/{task.value}/fold{fold}")

    def missing_cells(self) -> list[str]:
        have = {(r.spec, r.task, r.fold) for r in self.results}
        return [
            f"{spec.name}/{task.value}/fold{fold}"
            for spec in self.specs
            for task in self.tasks
            for fold in FOLDS
            if (spec, task, fold) not in have
        ]

    def validate(self) -> None:
        gaps = self.missing_cells()
        if gaps:
            raise ReportError("report is missing cells: " + ", ".join(gaps))
        for spec in self.specs:
            for task in self.tasks:
                expected = average_folds([self.fold_mae(spec, task, f) for f in FOLDS])
                stored = self.averages[(spec, task)]
                if abs(stored - expected) > 5e-4:
                    raise ReportError(
                        f"average for {spec.name}/{task.value} is {stored}, fold mean is {expected}"
                    )

    @staticmethod
    def assemble(
        results: Sequence[FoldResult],
        specs: Sequence[InputStackSpec],
        tasks: Sequence[TaskKind],
        **extra,
    ) -> "MetricsReport":
        averages = {}
        by_cell = {(r.spec, r.task, r.fold): r.mae for r in results}
        for spec in specs:
            for task in tasks:
                maes = [by_cell[(spec, task, f)] for f in FOLDS if (spec, task, f) in by_cell]
                if len(maes) == 3:
                    averages[(spec, task)] = average_folds(maes)
        return MetricsReport(
            results=tuple(results), averages=averages, specs=tuple(specs), tasks=tuple(tasks), **extra
        )

    @staticmethod
    def merge(reports: Sequence["MetricsReport"]) -> "MetricsReport":
        if not reports:
            raise ValueError("nothing to merge")
        results = [r for rep in reports for r in rep.results]
        specs = tuple(dict.fromkeys(s for rep in reports for s in rep.specs))
        tasks = tuple(dict.fromkeys(t for rep in reports for t in rep.tasks))
        isolation = {}
        for rep in reports:
            isolation.update(rep.isolation)
        first = reports[0]
        return MetricsReport.assemble(
            results,
            specs,
            tasks,
            seed=first.seed,
            deterministic=first.deterministic,
            config_echo=first.config_echo,
            isolation=isolation,
            created_at=first.created_at,
        )


PipelineFactory = Callable[..., Callable[[VideoSource], tuple[float, float, float]]]


def two_step_pipeline(
    exp: ExperimentConfig,
    fold: int,
    train_sources: Sequence[VideoSource],
    eval_sources: Sequence[VideoSource],
    labels: dict[str, SemenLabels],
    frames_cache: dict[str, np.ndarray],
) -> Callable[[VideoSource], tuple[float, float, float]]:
    """Train autoencoder then regressor on the training folds; return a per-video predictor."""

    def frames_of(source: VideoSource) -> np.ndarray:
        if source.video_id not in frames_cache:
            frames_cache[source.video_id] = decode_video(source, exp.frame_size)
        return frames_cache[source.video_id]

    ae_cfg = replace(exp.autoencoder, rng_seed=derive_seed(exp.rng_seed, exp.spec.name, exp.task.value, fold, "ae"))
    reg_cfg = replace(exp.regressor, rng_seed=derive_seed(exp.rng_seed, exp.spec.name, exp.task.value, fold, "reg"))
    train_plan = replace(
        exp.train_plan, rng_seed=derive_seed(exp.rng_seed, exp.spec.name, exp.task.value, fold, "plan")
    )

    train_stacks = []
    for source in train_sources:
        train_stacks.extend(sample_stacks(source, exp.spec, train_plan, exp.frame_size, frames_of(source)))
    ae_stacks = list(train_stacks)
    if exp.ae_on_all_folds:
        # looser protocol: unsupervised pretraining may also see held-out videos
        for source in eval_sources:
            ae_stacks.extend(sample_stacks(source, exp.spec, train_plan, exp.frame_size, frames_of(source)))

    model = build_autoencoder(ae_cfg)
    train_autoencoder(model, ae_stacks)
    reg = build_regressor(reg_cfg)
    dataset = [(s, select_target(labels[s.video_id], exp.task)) for s in train_stacks]
    train_regressor(model, reg, dataset)

    def predictor(source: VideoSource) -> tuple[float, float, float]:
        return predict_video(model, reg, source, exp.eval_plan, exp.frame_size, frames_of(source))

    return predictor


def run_cross_validation(exp: ExperimentConfig, pipeline_factory: PipelineFactory | None = None) -> MetricsReport:
    """Rotate over the three folds: fit on the other two, measure per-video MAE on the held-out one."""
    factory = pipeline_factory or two_step_pipeline
    labels = load_labels(exp.labels_file)
    split = load_folds(exp.folds_file)
    missing = [v for v in split.video_ids if v not in labels]
    if missing:
        raise ValidationError(f"fold file lists videos without labels: {missing}")
    sources = {vid: probe_video(resolve_video_path(exp.videos_dir, vid), vid) for vid in split.video_ids}

    frames_cache: dict[str, np.ndarray] = {}
    results = []
    isolation: dict[str, list[str]] = {}
    for fold in FOLDS:
        train_ids = split.train_videos(fold)
        eval_ids = split.videos_in_fold(fold)
        overlap = sorted(set(train_ids) & set(eval_ids))
        isolation[f"{exp.spec.name}:{exp.task.value}:fold{fold}"] = overlap
        if overlap:
            raise CrossValidationError(
                f"{exp.spec.name}/{exp.task.value}/fold{fold}: train and eval sets overlap: {overlap}"
            )
        try:
            predictor = factory(
                exp,
                fold,
                [sources[v] for v in train_ids],
                [sources[v] for v in eval_ids],
                labels,
                frames_cache,
            )
            preds = [predictor(sources[v]) for v in eval_ids]
            targets = [select_target(labels[v], exp.task) for v in eval_ids]
            fold_mae = mae(preds, targets)
        except CrossValidationError:
            raise
        except Exception as exc:
            raise CrossValidationError(f"{exp.spec.name}/{exp.task.value}/fold{fold} failed: {exc}") from exc
        results.append(FoldResult(fold=fold, task=exp.task, spec=exp.spec, mae=fold_mae, n_videos=len(eval_ids)))

    created = None if exp.deterministic else datetime.now(timezone.utc).isoformat()
    return MetricsReport.assemble(
        results,
        specs=(exp.spec,),
        tasks=(exp.task,),
        seed=exp.rng_seed,
        deterministic=exp.deterministic,
        config_echo=exp.to_dict(),
        isolation=isolation,
        created_at=created,
    )


def render_report(report: MetricsReport) -> str:
    """Format the fold/average table (grouped by input spec, 3-decimal cells)."""
    report.validate()
    header = ["Input", "Fold"]
    for task in report.tasks:
        header += [f"{task.value.capitalize()} MAE", "Average"]
    rows = [header]
    for spec in report.specs:
        for fold in FOLDS:
            row = [spec.name if fold == 1 else "", f"Fold {fold}"]
            for task in report.tasks:
                row.append(format_metric(report.fold_mae(spec, task, fold)))
                row.append(format_metric(report.averages[(spec, task)]) if fold == 1 else "")
            rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in rows]
    lines.insert(1, "-" * max(len(line) for line in lines))
    return "\n".join(lines) + "\n"


def report_to_csv(report: MetricsReport) -> str:
    """Full-precision CSV: one row per fold cell plus one per average."""
    report.validate()
    lines = ["spec,task,fold,mae"]
    for r in sorted(report.results, key=lambda r: (r.spec.name, r.task.value, r.fold)):
        lines.append(f"{r.spec.name},{r.task.value},{r.fold},{repr(r.mae)}")
    for (spec, task), value in sorted(report.averages.items(), key=lambda kv: (kv[0][0].name, kv[0][1].value)):
        lines.append(f"{spec.name},{task.value},average,{repr(value)}")
    return "\n".join(lines) + "\n"


def _report_payload(report: MetricsReport) -> dict:
    return {
        "format_version": REPORT_VERSION,
        "specs": [s.name for s in report.specs],
        "tasks": [t.value for t in report.tasks],
        "seed": report.seed,
        "deterministic": report.deterministic,
        "created_at": report.created_at,
        "config": report.config_echo,
        "config_hash": hashlib.sha256(
            json.dumps(report.config_echo, sort_keys=True).encode("utf-8")
        ).hexdigest(),
        "results": [
            {"spec": r.spec.name, "task": r.task.value, "fold": r.fold, "mae": r.mae, "n_videos": r.n_videos}
            for r in sorted(report.results, key=lambda r: (r.spec.name, r.task.value, r.fold))
        ],
        "averages": {
            f"{spec.name}:{task.value}": value
            for (spec, task), value in sorted(report.averages.items(), key=lambda kv: (kv[0][0].name, kv[0][1].value))
        },
        "isolation": report.isolation,
    }


def write_report_json(report: MetricsReport, path) -> None:
    """Write the machine-readable report with an embedded payload checksum."""
    payload = _report_payload(report)
    canonical = json.dumps(payload, sort_keys=True)
    document = dict(payload)
    document["checksum"] = hashlib.sha256(canonical.encode("utf-8")).hexdigest()
    atomic_write_text(Path(path), json.dumps(document, sort_keys=True, indent=1) + "\n")


def load_report_json(path) -> MetricsReport:
    """Load and checksum-verify a report; full-precision values round-trip exactly."""
    path = Path(path)
    if not path.exists():
        raise ReportError(f"report not found: {path}")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ReportError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(document, dict) or "checksum" not in document:
        raise ReportError(f"{path}: missing checksum field")
    stored = document.pop("checksum")
    canonical = json.dumps(document, sort_keys=True)
    if hashlib.sha256(canonical.encode("utf-8")).hexdigest() != stored:
        raise ReportError(f"{path}: checksum mismatch (corrupt report)")
    if document.get("format_version") != REPORT_VERSION:
        raise ReportError(f"{path}: unsupported report version {document.get('format_version')!r}")
    specs = tuple(InputStackSpec.parse(s) for s in document["specs"])
    tasks = tuple(TaskKind.parse(t) for t in document["tasks"])
    results = tuple(
        FoldResult(
            fold=r["fold"],
            task=TaskKind.parse(r["task"]),
            spec=InputStackSpec.parse(r["spec"]),
            mae=r["mae"],
            n_videos=r["n_videos"],
        )
        for r in document["results"]
    )
    averages = {}
    for key, value in document["averages"].items():
        spec_name, task_name = key.split(":")
        averages[(InputStackSpec.parse(spec_name), TaskKind.parse(task_name))] = value
    report = MetricsReport(
        results=results,
        averages=averages,
        specs=specs,
        tasks=tasks,
        seed=document["seed"],
        deterministic=document["deterministic"],
        config_echo=document["config"],
        isolation=document["isolation"],
        created_at=document["created_at"],
    )
    report.validate()
    return report
