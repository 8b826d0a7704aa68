"""Shared domain types and label/fold file IO for the sperm-video pipeline.

Value conventions used everywhere else:

- frames, stacks and feature images are float32 arrays; pixel values live in [0, 1]
- percentages are floats in [0, 100]
- parsers are pure functions and all types are immutable after construction,
  so everything here is safe to share across threads

File schemas (UTF-8, LF, ``.`` decimal separator):

- label file: CSV with header
  ``video_id,progressive,non_progressive,immotile,head_defects,midpiece_defects,tail_defects``
- fold file: CSV with header ``video_id,fold``, fold in {1, 2, 3}
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, fields
from enum import Enum
from pathlib import Path

import numpy as np

# progressive + non_progressive + immotile must equal 100 within this slack;
# real analyses round to integer percentages, so demanding exactly 100 would
# reject valid data.
MOTILITY_SUM_TOLERANCE = 0.5

LABEL_HEADER = (
    "video_id",
    "progressive",
    "non_progressive",
    "immotile",
    "head_defects",
    "midpiece_defects",
    "tail_defects",
)
FOLD_HEADER = ("video_id", "fold")
FOLD_IDS = (1, 2, 3)


class DataError(Exception):
    """Base class for data-contract violations."""


class SchemaError(DataError):
    """File header or row layout does not match the documented schema."""


class ValidationError(DataError):
    """A value violates a domain invariant."""


class ConflictError(DataError):
    """The same key is defined more than once."""


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from arbitrary values (unlike hash(), stable across runs)."""
    key = ":".join(str(p) for p in parts)
    digest = hashlib.blake2s(key.encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


class InputStackSpec(Enum):
    """The four model input constructions; the enum value is the channel count.

    I1 is a single raw frame, I2 the same frame copied across three channels,
    I3 and I4 stacks of 9 and 18 consecutive frames.
    """

    I1 = 1
    I2 = 3
    I3 = 9
    I4 = 18

    @property
    def channel_count(self) -> int:
        return self.value

    @property
    def temporal(self) -> bool:
        return self.value in (9, 18)

    @classmethod
    def parse(cls, name: str) -> "InputStackSpec":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            valid = ", ".join(s.name for s in cls)
            raise ValidationError(f"unknown input spec {name!r}; valid specs: {valid}") from None


class TaskKind(Enum):
    """Which three label fields a regressor predicts."""

    MOTILITY = "motility"
    MORPHOLOGY = "morphology"

    @property
    def target_fields(self) -> tuple[str, str, str]:
        if self is TaskKind.MOTILITY:
            return ("progressive", "non_progressive", "immotile")
        return ("head_defects", "midpiece_defects", "tail_defects")

    @classmethod
    def parse(cls, name: str) -> "TaskKind":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(t.value for t in cls)
            raise ValidationError(f"unknown task {name!r}; valid tasks: {valid}") from None


@dataclass(frozen=True)
class SemenLabels:
    """Per-video ground truth: a motility triple and a morphology triple.

    Motility percentages must sum to 100 within MOTILITY_SUM_TOLERANCE.
    Morphology percentages are independent (a sperm can have several or no
    defects), so they carry no sum constraint.
    """

    progressive: float
    non_progressive: float
    immotile: float
    head_defects: float
    midpiece_defects: float
    tail_defects: float

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not np.isfinite(value) or not 0.0 <= value <= 100.0:
                raise ValidationError(f"{f.name}={value!r} outside [0, 100]")
        total = self.progressive + self.non_progressive + self.immotile
        if abs(total - 100.0) > MOTILITY_SUM_TOLERANCE:
            raise ValidationError(f"motility percentages sum to {total}, expected 100 +/- {MOTILITY_SUM_TOLERANCE}")


def select_target(labels: SemenLabels, task: TaskKind) -> tuple[float, float, float]:
    """Project the three regression targets for a task out of a label record."""
    a, b, c = task.target_fields
    return (getattr(labels, a), getattr(labels, b), getattr(labels, c))


@dataclass(frozen=True)
class FrameStack:
    """A channel_count x H x W block of normalized frames, the unit fed to the encoder.

    For I2 all three channels are bit-identical copies of one frame; for I3/I4
    channel k holds frame start_frame + k.
    """

    data: np.ndarray
    video_id: str
    start_frame: int
    spec: InputStackSpec

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        object.__setattr__(self, "data", data)
        if data.ndim != 3:
            raise ValidationError(f"stack data must be 3-d (C, H, W), got shape {data.shape}")
        c, h, w = data.shape
        if c != self.spec.channel_count:
            raise ValidationError(f"{self.spec.name} stack needs {self.spec.channel_count} channels, got {c}")
        if h != w:
            raise ValidationError(f"frames must be square, got {h}x{w}")
        if self.start_frame < 0:
            raise ValidationError(f"start_frame must be >= 0, got {self.start_frame}")
        if not np.isfinite(data).all():
            raise ValidationError("stack contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValidationError(f"stack values outside [0, 1]: min={data.min()}, max={data.max()}")
        if self.spec is InputStackSpec.I2:
            if (data[1] != data[0]).any() or (data[2] != data[0]).any():
                raise ValidationError("I2 stack channels must be bit-identical copies of one frame")

    @property
    def frame_size(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class FeatureImage:
    """Encoder output: F feature channels at the source stack's spatial resolution."""

    data: np.ndarray
    source_video_id: str
    source_start_frame: int

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        object.__setattr__(self, "data", data)
        if data.ndim != 3:
            raise ValidationError(f"feature image must be 3-d (F, H, W), got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValidationError("feature image contains non-finite values")


@dataclass(frozen=True)
class FoldSplit:
    """Partition of video ids into folds 1..3; every fold must be non-empty."""

    assignment: dict[str, int]

    def __post_init__(self):
        if not self.assignment:
            raise ValidationError("fold split is empty")
        bad = {v: f for v, f in self.assignment.items() if f not in FOLD_IDS}
        if bad:
            raise ValidationError(f"fold index outside {set(FOLD_IDS)}: {bad}")
        empty = [f for f in FOLD_IDS if f not in set(self.assignment.values())]
        if empty:
            raise ValidationError("; ".join(f"fold {f} empty" for f in empty))

    def videos_in_fold(self, fold: int) -> tuple[str, ...]:
        return tuple(sorted(v for v, f in self.assignment.items() if f == fold))

    def train_videos(self, held_out_fold: int) -> tuple[str, ...]:
        return tuple(sorted(v for v, f in self.assignment.items() if f != held_out_fold))

    @property
    def video_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.assignment))


def _read_rows(path: Path, expected_header: tuple[str, ...]) -> list[list[str]]:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected header {','.join(expected_header)}") from None
        if tuple(h.strip() for h in header) != expected_header:
            raise SchemaError(f"{path}: header {header} does not match required columns {list(expected_header)}")
        return [row for row in reader if row and any(cell.strip() for cell in row)]


def load_labels(path) -> dict[str, SemenLabels]:
    """Parse a label CSV into a video_id -> SemenLabels map, validating every row."""
    rows = _read_rows(Path(path), LABEL_HEADER)
    labels: dict[str, SemenLabels] = {}
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(LABEL_HEADER):
            raise SchemaError(f"{path}:{lineno}: expected {len(LABEL_HEADER)} columns, got {len(row)}")
        video_id = row[0].strip()
        if not video_id:
            raise SchemaError(f"{path}:{lineno}: empty video_id")
        if video_id in labels:
            raise ConflictError(f"{path}:{lineno}: duplicate video_id {video_id!r}")
        try:
            values = [float(cell) for cell in row[1:]]
        except ValueError as exc:
            raise SchemaError(f"{path}:{lineno}: non-numeric value ({exc})") from None
        try:
            labels[video_id] = SemenLabels(*values)
        except ValidationError as exc:
            raise ValidationError(f"video {video_id!r}: {exc}") from None
    return labels


def save_labels(path, labels: dict[str, SemenLabels]) -> None:
    """Write a label map back to CSV; floats use repr so a reload is field-identical."""
    lines = [",".join(LABEL_HEADER)]
    for video_id in sorted(labels):
        lab = labels[video_id]
        lines.append(",".join([video_id] + [repr(getattr(lab, f)) for f in LABEL_HEADER[1:]]))
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def load_folds(path) -> FoldSplit:
    """Parse a fold CSV into a validated FoldSplit."""
    rows = _read_rows(Path(path), FOLD_HEADER)
    assignment: dict[str, int] = {}
    for lineno, row in enumerate(rows, start=2):
        if len(row) != 2:
            raise SchemaError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
        video_id = row[0].strip()
        if video_id in assignment:
            raise ConflictError(f"{path}:{lineno}: duplicate video_id {video_id!r}")
        try:
            fold = int(row[1])
        except ValueError:
            raise SchemaError(f"{path}:{lineno}: fold must be an integer, got {row[1]!r}") from None
        if fold not in FOLD_IDS:
            raise ValidationError(f"{path}:{lineno}: fold {fold} outside {set(FOLD_IDS)}")
        assignment[video_id] = fold
    return FoldSplit(assignment)


def save_folds(path, split: FoldSplit) -> None:
    lines = [",".join(FOLD_HEADER)]
    for video_id in sorted(split.assignment):
        lines.append(f"{video_id},{split.assignment[video_id]}")
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write via a temp file and rename, so a failed write never clobbers an old output."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(Path(path), text.encode("utf-8"))
