"""Video decoding, frame normalization, and FrameStack assembly/sampling.

Frames are decoded to single-channel grayscale, resized bilinearly to a square
working size, and scaled into [0, 1] before any stacking. Two on-disk sources
are supported:

- any container OpenCV can open (mp4, avi, ...)
- the raw frame-cache format ``.frames``: a little-endian binary file with

  ========================  =========================================
  magic                     8 bytes, ``b"SVFRAMES"``
  header length             uint32
  header                    UTF-8 JSON: video_id, frame_count, height,
                            width, dtype ("uint8" or "float32")
  body                      frame_count * height * width values,
                            row-major within a frame, frame-major
  ========================  =========================================

uint8 bodies are scaled by 1/255 on load; float32 bodies must already be
in [0, 1].
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import cv2
import numpy as np

from .core import DataError, FrameStack, InputStackSpec, ValidationError, atomic_write_bytes, derive_seed

FRAME_CACHE_MAGIC = b"SVFRAMES"
FRAME_CACHE_VERSION = 1
FRAME_CACHE_SUFFIX = ".frames"
VIDEO_SUFFIXES = (FRAME_CACHE_SUFFIX, ".avi", ".mp4", ".mkv", ".mov", ".webm")

DEFAULT_FRAME_SIZE = 256


class DecodeError(DataError):
    """A video file could not be read or yielded no frames."""


class SamplingMode(Enum):
    UNIFORM_RANDOM_START = "uniform_random_start"
    EVENLY_SPACED = "evenly_spaced"


@dataclass(frozen=True)
class VideoSource:
    """Resolved handle to one video on disk."""

    video_id: str
    path: Path
    frame_count: int
    native_size: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "path", Path(self.path))
        if self.frame_count <= 0:
            raise ValidationError(f"{self.video_id}: frame_count must be > 0, got {self.frame_count}")


@dataclass(frozen=True)
class SamplingPlan:
    """How many stacks to draw per video and how to place their start frames."""

    stacks_per_video: int
    rng_seed: int = 0
    mode: SamplingMode = SamplingMode.UNIFORM_RANDOM_START

    def __post_init__(self):
        if self.stacks_per_video <= 0:
            raise ValidationError(f"stacks_per_video must be > 0, got {self.stacks_per_video}")
        if not isinstance(self.mode, SamplingMode):
            object.__setattr__(self, "mode", SamplingMode(self.mode))


def write_frame_cache(path, video_id: str, frames: np.ndarray) -> None:
    """Write a (N, H, W) uint8 or float32 frame array in the cache layout."""
    frames = np.ascontiguousarray(frames)
    if frames.ndim != 3:
        raise ValidationError(f"frames must be (N, H, W), got shape {frames.shape}")
    if frames.dtype not in (np.uint8, np.float32):
        raise ValidationError(f"unsupported frame dtype {frames.dtype}; use uint8 or float32")
    n, h, w = frames.shape
    header = json.dumps(
        {
            "version": FRAME_CACHE_VERSION,
            "video_id": video_id,
            "frame_count": int(n),
            "height": int(h),
            "width": int(w),
            "dtype": frames.dtype.name,
        },
        sort_keys=True,
    ).encode("utf-8")
    blob = FRAME_CACHE_MAGIC + struct.pack("<I", len(header)) + header + frames.tobytes()
    atomic_write_bytes(Path(path), blob)


def _read_cache_header(raw: bytes, path: Path) -> tuple[dict, int]:
    if len(raw) < len(FRAME_CACHE_MAGIC) + 4 or raw[: len(FRAME_CACHE_MAGIC)] != FRAME_CACHE_MAGIC:
        raise DecodeError(f"{path}: not a frame-cache file")
    (header_len,) = struct.unpack_from("<I", raw, len(FRAME_CACHE_MAGIC))
    body_start = len(FRAME_CACHE_MAGIC) + 4 + header_len
    if len(raw) < body_start:
        raise DecodeError(f"{path}: truncated header")
    try:
        header = json.loads(raw[len(FRAME_CACHE_MAGIC) + 4 : body_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"{path}: corrupt header ({exc})") from None
    if header.get("version") != FRAME_CACHE_VERSION:
        raise DecodeError(f"{path}: unsupported frame-cache version {header.get('version')!r}")
    return header, body_start


def read_frame_cache(path) -> tuple[str, np.ndarray]:
    """Load a frame-cache file; returns (video_id, float32 frames in [0, 1])."""
    path = Path(path)
    raw = path.read_bytes()
    header, body_start = _read_cache_header(raw, path)
    n, h, w = header["frame_count"], header["height"], header["width"]
    dtype = np.dtype(header["dtype"])
    if dtype not in (np.uint8, np.float32):
        raise DecodeError(f"{path}: unsupported body dtype {dtype}")
    expected = n * h * w * dtype.itemsize
    body = raw[body_start:]
    if len(body) != expected:
        raise DecodeError(f"{path}: body is {len(body)} bytes, expected {expected}")
    frames = np.frombuffer(body, dtype=dtype).reshape(n, h, w)
    if dtype == np.uint8:
        frames = frames.astype(np.float32) / 255.0
    else:
        frames = frames.copy()
        if frames.min() < 0.0 or frames.max() > 1.0:
            raise DecodeError(f"{path}: float32 frames outside [0, 1]")
    return header["video_id"], frames


def _decode_container(path: Path) -> np.ndarray:
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise DecodeError(f"cannot open video {path}")
    frames = []
    while True:
        ok, frame = cap.read()
        if not ok:
            break
        if frame.ndim == 3:
            frame = cv2.cvtColor(frame, cv2.COLOR_BGR2GRAY)
        frames.append(frame.astype(np.float32) / 255.0)
    cap.release()
    if not frames:
        raise DecodeError(f"{path}: no decodable frames")
    return np.stack(frames)


def _load_raw_frames(path: Path) -> tuple[str | None, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DecodeError(f"video file not found: {path}")
    if path.suffix == FRAME_CACHE_SUFFIX:
        return read_frame_cache(path)
    return None, _decode_container(path)


def probe_video(path, video_id: str | None = None) -> VideoSource:
    """Build a VideoSource by inspecting a file on disk.

    For cache files only the header is read; containers are fully decoded to
    get an exact frame count.
    """
    path = Path(path)
    if path.suffix == FRAME_CACHE_SUFFIX:
        if not path.exists():
            raise DecodeError(f"video file not found: {path}")
        header, _ = _read_cache_header(path.read_bytes(), path)
        return VideoSource(
            video_id=video_id or header["video_id"],
            path=path,
            frame_count=header["frame_count"],
            native_size=(header["height"], header["width"]),
        )
    _, frames = _load_raw_frames(path)
    return VideoSource(
        video_id=video_id or path.stem,
        path=path,
        frame_count=frames.shape[0],
        native_size=(frames.shape[1], frames.shape[2]),
    )


def decode_video(source: VideoSource, frame_size: int = DEFAULT_FRAME_SIZE) -> np.ndarray:
    """Decode a video to (frame_count, frame_size, frame_size) float32 in [0, 1]."""
    _, frames = _load_raw_frames(source.path)
    if frames.shape[0] != source.frame_count:
        raise DecodeError(
            f"{source.path}: decoded {frames.shape[0]} frames but source says {source.frame_count} (stale probe?)"
        )
    if frames.shape[1:] != (frame_size, frame_size):
        frames = np.stack(
            [cv2.resize(f, (frame_size, frame_size), interpolation=cv2.INTER_LINEAR) for f in frames]
        )
        # bilinear output is a convex combination of inputs; clip float dust
        np.clip(frames, 0.0, 1.0, out=frames)
    return np.ascontiguousarray(frames, dtype=np.float32)


def build_stack(frames: np.ndarray, spec: InputStackSpec, start: int, video_id: str = "") -> FrameStack:
    """Assemble one FrameStack from decoded frames.

    I1 takes frames[start] as a single channel, I2 copies it across three
    channels, I3/I4 take channel_count consecutive frames at stride 1.
    """
    n = len(frames)
    if spec.temporal:
        if not 0 <= start <= n - spec.channel_count:
            raise IndexError(
                f"start {start} out of range for {spec.name}: needs {spec.channel_count} frames, "
                f"video has {n} (valid starts 0..{n - spec.channel_count})"
            )
        data = np.asarray(frames[start : start + spec.channel_count])
    else:
        if not 0 <= start < n:
            raise IndexError(f"start {start} out of range for video with {n} frames")
        frame = np.asarray(frames[start])
        data = frame[None] if spec is InputStackSpec.I1 else np.repeat(frame[None], 3, axis=0)
    return FrameStack(data=data, video_id=video_id, start_frame=start, spec=spec)


def evenly_spaced_starts(n_frames: int, channel_count: int, count: int) -> list[int]:
    """Deterministic start indices: floor(i * (N - k) / (count - 1)); [0] when count == 1."""
    span = n_frames - channel_count
    if count == 1:
        return [0]
    return [(i * span) // (count - 1) for i in range(count)]


def sample_stacks(
    source: VideoSource,
    spec: InputStackSpec,
    plan: SamplingPlan,
    frame_size: int = DEFAULT_FRAME_SIZE,
    frames: np.ndarray | None = None,
) -> list[FrameStack]:
    """Draw plan.stacks_per_video stacks from a video, deterministically per seed.

    Start indices always satisfy 0 <= s <= frame_count - channel_count, the
    conservative bound that is valid for every spec. Pass pre-decoded frames
    to skip the decode step.
    """
    if frames is None:
        frames = decode_video(source, frame_size)
    n = len(frames)
    k = spec.channel_count
    if n < k:
        raise ValidationError(f"video {source.video_id!r} has {n} frames; spec {spec.name} needs at least {k}")
    max_start = n - k
    if plan.mode is SamplingMode.EVENLY_SPACED:
        starts = evenly_spaced_starts(n, k, plan.stacks_per_video)
    else:
        rng = np.random.default_rng(derive_seed(plan.rng_seed, source.video_id))
        starts = sorted(int(s) for s in rng.integers(0, max_start + 1, size=plan.stacks_per_video))
    return [build_stack(frames, spec, s, video_id=source.video_id) for s in starts]


def resolve_video_path(videos_dir, video_id: str) -> Path:
    """Find <videos_dir>/<video_id>.<ext> for any supported extension."""
    videos_dir = Path(videos_dir)
    for suffix in VIDEO_SUFFIXES:
        candidate = videos_dir / f"{video_id}{suffix}"
        if candidate.exists():
            return candidate
    raise DecodeError(f"no video file for id {video_id!r} in {videos_dir}")
