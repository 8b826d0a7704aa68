"""Synthetic microscopy-like videos with exactly known labels.

Particles get motility classes by exact quota (round half up of
n * fraction, remainder to immotile), so the stored labels are true by
construction instead of estimated, and the per-particle log makes every
label recountable and every trajectory checkable:

- progressive: straight path at constant speed with the start position
  chosen so the whole path stays inside the frame; net displacement is
  then exactly speed * (n_frames - 1). Border reflection exists as a
  defensive clamp but never triggers for feasible parameters.
- non_progressive: independent per-frame offsets of norm <= 0.99 * jitter_px
  around a fixed center, so net displacement stays strictly below
  2 * jitter_px.
- immotile: one static position.

Each particle renders as a bright anti-aliased ellipse head, a short
midpiece segment, and a thin two-segment tail on a uniform gray
background (microscopy fields are not pure black, and an all-zero
background starves rectifier nets of gradient signal). Defect flags perturb head
eccentricity (round instead of oval), midpiece brightness (dimmed), or
tail length (stubby), so the morphology analogs are visible in single
frames while motility is only visible across frames.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import cv2
import numpy as np

from .core import FoldSplit, SemenLabels, ValidationError, atomic_write_text, save_folds, save_labels
from .ingestion import write_frame_cache

CLASS_NAMES = ("progressive", "non_progressive", "immotile")

# rendering geometry in pixels (at any frame size)
HEAD_AXES = (2.2, 1.3)
HEAD_DEFECT_AXES = (1.7, 1.7)
MIDPIECE_LEN = 2.5
TAIL_LEN = 7.0
TAIL_DEFECT_LEN = 2.5
TAIL_BEND_DEG = 18.0
HEAD_BRIGHTNESS = 1.0
MIDPIECE_BRIGHTNESS = 0.85
MIDPIECE_DEFECT_BRIGHTNESS = 0.3  # dim but still above the default background
TAIL_BRIGHTNESS = 0.55
BORDER_MARGIN = 12.0


def _margin(frame_size: int) -> float:
    # tiny test frames trade a little tail clipping for usable path room
    return min(BORDER_MARGIN, frame_size / 4.0)

_SHIFT = 4
_SUB = 1 << _SHIFT


@dataclass(frozen=True)
class SynthParams:
    """Generation knobs; fractions are per-video class/defect shares."""

    n_particles: int = 12
    motility_fractions: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    defect_fractions: tuple[float, float, float] = (0.2, 0.2, 0.2)
    n_frames: int = 24
    frame_size: int = 64
    speed_px_per_frame: float = 1.5
    jitter_px: float = 1.0
    noise_sigma: float = 0.02
    background_level: float = 0.15
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_particles <= 0:
            raise ValidationError(f"n_particles must be > 0, got {self.n_particles}")
        if self.n_frames < 18:
            raise ValidationError(f"n_frames must be >= 18 (largest stack), got {self.n_frames}")
        if len(self.motility_fractions) != 3 or min(self.motility_fractions) < 0:
            raise ValidationError(f"bad motility fractions {self.motility_fractions}")
        if abs(sum(self.motility_fractions) - 1.0) > 1e-9:
            raise ValidationError(f"motility fractions sum to {sum(self.motility_fractions)}, expected 1")
        if len(self.defect_fractions) != 3 or any(not 0 <= d <= 1 for d in self.defect_fractions):
            raise ValidationError(f"defect fractions must lie in [0, 1], got {self.defect_fractions}")
        if self.speed_px_per_frame <= 0:
            raise ValidationError("speed_px_per_frame must be > 0")
        if self.jitter_px < 0 or self.noise_sigma < 0:
            raise ValidationError("jitter_px and noise_sigma must be >= 0")
        if not 0.0 <= self.background_level < TAIL_BRIGHTNESS:
            raise ValidationError(
                f"background_level must lie in [0, {TAIL_BRIGHTNESS}) so particles stay visible, "
                f"got {self.background_level}"
            )
        travel = self.speed_px_per_frame * (self.n_frames - 1)
        room = self.frame_size - 2 * _margin(self.frame_size)
        if room <= 0 or travel > room:
            raise ValidationError(
                f"progressive path of {travel:.1f} px cannot fit a {self.frame_size} px frame "
                f"with {_margin(self.frame_size)} px margins; lower speed/n_frames or enlarge the frame"
            )


@dataclass(frozen=True)
class ParticleTrack:
    """Ground-truth record for one particle."""

    particle_id: int
    motion_class: str
    positions: np.ndarray  # (n_frames, 2) float64, (x, y)
    heading: float
    head_defect: bool
    midpiece_defect: bool
    tail_defect: bool

    def net_displacement(self) -> float:
        return float(np.linalg.norm(self.positions[-1] - self.positions[0]))


@dataclass(frozen=True)
class SynthVideo:
    frames: np.ndarray  # (n_frames, s, s) float32 in [0, 1]
    labels: SemenLabels
    particle_log: tuple[ParticleTrack, ...]
    params: SynthParams


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def class_quotas(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    """Exact class counts: round half up for progressive and non-progressive, rest immotile."""
    n_prog = min(_round_half_up(n * fractions[0]), n)
    n_non = min(_round_half_up(n * fractions[1]), n - n_prog)
    return n_prog, n_non, n - n_prog - n_non


def labels_from_counts(n: int, classes: tuple[int, int, int], defects: tuple[int, int, int]) -> SemenLabels:
    return SemenLabels(
        progressive=100.0 * classes[0] / n,
        non_progressive=100.0 * classes[1] / n,
        immotile=100.0 * classes[2] / n,
        head_defects=100.0 * defects[0] / n,
        midpiece_defects=100.0 * defects[1] / n,
        tail_defects=100.0 * defects[2] / n,
    )


def recount_labels(particle_log: tuple[ParticleTrack, ...]) -> SemenLabels:
    """Independent recount of the log; must reproduce SynthVideo.labels bit-exactly."""
    n = len(particle_log)
    classes = tuple(sum(1 for p in particle_log if p.motion_class == name) for name in CLASS_NAMES)
    defects = (
        sum(1 for p in particle_log if p.head_defect),
        sum(1 for p in particle_log if p.midpiece_defect),
        sum(1 for p in particle_log if p.tail_defect),
    )
    return labels_from_counts(n, classes, defects)


def _reflect(value: float, low: float, high: float) -> float:
    # defensive clamp; feasible params never reach the borders
    while value < low or value > high:
        if value < low:
            value = 2 * low - value
        else:
            value = 2 * high - value
    return value


def _progressive_track(rng: np.random.Generator, params: SynthParams) -> tuple[np.ndarray, float]:
    s = params.frame_size
    m = _margin(s)
    heading = rng.uniform(0.0, 2.0 * math.pi)
    step = params.speed_px_per_frame * np.array([math.cos(heading), math.sin(heading)])
    travel = step * (params.n_frames - 1)
    start = np.empty(2)
    for axis in range(2):
        lo = m + max(0.0, -travel[axis])
        hi = s - m - max(0.0, travel[axis])
        start[axis] = rng.uniform(lo, hi)
    t = np.arange(params.n_frames)[:, None]
    positions = start[None, :] + t * step[None, :]
    for axis in range(2):
        positions[:, axis] = [_reflect(v, m, s - m) for v in positions[:, axis]]
    return positions, heading


def _jitter_track(rng: np.random.Generator, params: SynthParams) -> tuple[np.ndarray, float]:
    s = params.frame_size
    m = _margin(s) + params.jitter_px
    heading = rng.uniform(0.0, 2.0 * math.pi)
    center = rng.uniform(m, s - m, size=2)
    radius = rng.uniform(0.0, 0.99 * params.jitter_px, size=params.n_frames)
    angle = rng.uniform(0.0, 2.0 * math.pi, size=params.n_frames)
    offsets = radius[:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    return center[None, :] + offsets, heading


def _static_track(rng: np.random.Generator, params: SynthParams) -> tuple[np.ndarray, float]:
    s = params.frame_size
    m = _margin(s)
    heading = rng.uniform(0.0, 2.0 * math.pi)
    center = rng.uniform(m, s - m, size=2)
    return np.repeat(center[None, :], params.n_frames, axis=0), heading


def _pt(xy) -> tuple[int, int]:
    return (int(round(xy[0] * _SUB)), int(round(xy[1] * _SUB)))


def _draw_particle(img: np.ndarray, pos: np.ndarray, track: ParticleTrack) -> None:
    u = np.array([math.cos(track.heading), math.sin(track.heading)])
    head_axes = HEAD_DEFECT_AXES if track.head_defect else HEAD_AXES
    mid_brightness = MIDPIECE_DEFECT_BRIGHTNESS if track.midpiece_defect else MIDPIECE_BRIGHTNESS
    tail_len = TAIL_DEFECT_LEN if track.tail_defect else TAIL_LEN

    rear = pos - u * head_axes[0]
    mid_end = rear - u * MIDPIECE_LEN
    bend = math.radians(TAIL_BEND_DEG)
    v = np.array([math.cos(track.heading + bend), math.sin(track.heading + bend)])
    tail_mid = mid_end - u * (tail_len * 0.5)
    tail_end = tail_mid - v * (tail_len * 0.5)

    cv2.line(img, _pt(mid_end), _pt(tail_mid), TAIL_BRIGHTNESS, 1, cv2.LINE_AA, _SHIFT)
    cv2.line(img, _pt(tail_mid), _pt(tail_end), TAIL_BRIGHTNESS, 1, cv2.LINE_AA, _SHIFT)
    cv2.line(img, _pt(rear), _pt(mid_end), mid_brightness, 1, cv2.LINE_AA, _SHIFT)
    cv2.ellipse(
        img,
        _pt(pos),
        (int(round(head_axes[0] * _SUB)), int(round(head_axes[1] * _SUB))),
        math.degrees(track.heading),
        0,
        360,
        HEAD_BRIGHTNESS,
        -1,
        cv2.LINE_AA,
        _SHIFT,
    )


def generate_video(params: SynthParams) -> SynthVideo:
    """Render one video; labels derive from exact particle counts."""
    n = params.n_particles
    quotas = class_quotas(n, params.motility_fractions)
    if quotas[1] > 0 and params.jitter_px <= 0:
        raise ValidationError("jitter_px must be > 0 when non-progressive particles are requested")
    rng = np.random.default_rng(params.rng_seed)

    defect_counts = tuple(min(_round_half_up(n * d), n) for d in params.defect_fractions)
    defect_flags = np.zeros((3, n), dtype=bool)
    for d, count in enumerate(defect_counts):
        defect_flags[d, rng.choice(n, size=count, replace=False)] = True

    tracks: list[ParticleTrack] = []
    class_of = ["progressive"] * quotas[0] + ["non_progressive"] * quotas[1] + ["immotile"] * quotas[2]
    for i, cls in enumerate(class_of):
        maker = {"progressive": _progressive_track, "non_progressive": _jitter_track, "immotile": _static_track}[cls]
        positions, heading = maker(rng, params)
        tracks.append(
            ParticleTrack(
                particle_id=i,
                motion_class=cls,
                positions=positions,
                heading=heading,
                head_defect=bool(defect_flags[0, i]),
                midpiece_defect=bool(defect_flags[1, i]),
                tail_defect=bool(defect_flags[2, i]),
            )
        )

    s = params.frame_size
    frames = np.full((params.n_frames, s, s), params.background_level, dtype=np.float32)
    for t in range(params.n_frames):
        img = frames[t]
        for track in tracks:
            _draw_particle(img, track.positions[t], track)
        if params.noise_sigma > 0:
            img += rng.normal(0.0, params.noise_sigma, size=img.shape).astype(np.float32)
        np.clip(img, 0.0, 1.0, out=img)

    labels = labels_from_counts(n, quotas, defect_counts)
    return SynthVideo(frames=frames, labels=labels, particle_log=tuple(tracks), params=params)


def generate_dataset(
    n_videos: int,
    params_template: SynthParams,
    rng_seed: int,
    defect_max: float = 0.5,
) -> tuple[dict[str, SynthVideo], dict[str, SemenLabels], FoldSplit]:
    """Generate n_videos with random per-video labels and a round-robin fold split."""
    if n_videos < 3:
        raise ValidationError(f"need at least 3 videos for a three-fold split, got {n_videos}")
    master = np.random.default_rng(rng_seed)
    videos: dict[str, SynthVideo] = {}
    labels: dict[str, SemenLabels] = {}
    assignment: dict[str, int] = {}
    for i in range(n_videos):
        fractions = tuple(float(f) for f in master.dirichlet((1.0, 1.0, 1.0)))
        defects = tuple(float(d) for d in master.uniform(0.0, defect_max, size=3))
        seed = int(master.integers(0, 2**31 - 1))
        params = replace(
            params_template,
            motility_fractions=fractions,
            defect_fractions=defects,
            rng_seed=seed,
        )
        video_id = f"v{i + 1:03d}"
        videos[video_id] = generate_video(params)
        labels[video_id] = videos[video_id].labels
        assignment[video_id] = i % 3 + 1
    return videos, labels, FoldSplit(assignment)


def particle_log_payload(video_id: str, video: SynthVideo) -> dict:
    return {
        "video_id": video_id,
        "n_particles": video.params.n_particles,
        "particles": [
            {
                "id": p.particle_id,
                "class": p.motion_class,
                "heading": p.heading,
                "head_defect": p.head_defect,
                "midpiece_defect": p.midpiece_defect,
                "tail_defect": p.tail_defect,
                "positions": [[float(x), float(y)] for x, y in p.positions],
            }
            for p in video.particle_log
        ],
    }


def load_particle_log(path) -> tuple[ParticleTrack, ...]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return tuple(
        ParticleTrack(
            particle_id=p["id"],
            motion_class=p["class"],
            positions=np.asarray(p["positions"], dtype=np.float64),
            heading=p["heading"],
            head_defect=p["head_defect"],
            midpiece_defect=p["midpiece_defect"],
            tail_defect=p["tail_defect"],
        )
        for p in payload["particles"]
    )


def write_dataset(
    out_dir,
    videos: dict[str, SynthVideo],
    labels: dict[str, SemenLabels],
    split: FoldSplit,
    container: str = "frames",
    fps: float = 25.0,
) -> None:
    """Write videos plus labels.csv, folds.csv, and per-video particle logs.

    container "frames" writes uint8 frame-cache files; "avi" writes MJPG avi.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for video_id in sorted(videos):
        video = videos[video_id]
        frames_u8 = np.round(video.frames * 255.0).astype(np.uint8)
        if container == "frames":
            write_frame_cache(out_dir / f"{video_id}.frames", video_id, frames_u8)
        elif container == "avi":
            path = out_dir / f"{video_id}.avi"
            writer = cv2.VideoWriter(
                str(path), cv2.VideoWriter_fourcc(*"MJPG"), fps, (video.params.frame_size, video.params.frame_size), False
            )
            if not writer.isOpened():
                raise ValidationError(f"cv2 cannot open an MJPG writer for {path}")
            for frame in frames_u8:
                writer.write(frame)
            writer.release()
        else:
            raise ValidationError(f"unknown container {container!r}; use 'frames' or 'avi'")
        atomic_write_text(
            out_dir / f"{video_id}.particles.json",
            json.dumps(particle_log_payload(video_id, video), sort_keys=True, indent=1),
        )
    save_labels(out_dir / "labels.csv", labels)
    save_folds(out_dir / "folds.csv", split)
