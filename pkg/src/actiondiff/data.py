"""Synthetic procedure videos and the clip-preprocessing pipeline.

Videos are rendered as a flat background, a soft "target" blob and a soft
"instrument" sprite whose motion is fixed by the verb of the segment triplet.
Preprocessing splits at scene cuts (thresholded HSV frame difference), tiles
scenes into 7-frame windows and keeps windows that share a triplet across all
frames and contain neither black nor unannotated frames.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image

from .schema import (
    NO_ACTION_VERBS,
    NUM_INSTRUMENTS,
    NUM_PHASES,
    NUM_TARGETS,
    NUM_VERBS,
    ActionTriplet,
    FrameAnnotation,
)

logger = logging.getLogger(__name__)

CLIP_LEN = 7
CUT_THRESHOLD = 0.27
SPRITE_RADIUS = 3.5
TARGET_RADIUS = 6.0


@dataclass
class RawVideo:
    frames: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    annotations: List[FrameAnnotation]
    name: str = "video"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ValueError(f"frames must be N x 3 x H x W, got {self.frames.shape}")
        if len(self.frames) < 1:
            raise ValueError("a video needs at least one frame")
        if len(self.annotations) != len(self.frames):
            raise ValueError("one annotation per frame is required")

    def __len__(self):
        return len(self.frames)


@dataclass
class Clip:
    frames: np.ndarray  # (7, 3, H, W)
    annotations: List[FrameAnnotation]
    common_triplet: ActionTriplet
    source: str = ""
    start: int = 0

    @property
    def name(self) -> str:
        return f"{self.source}@{self.start:05d}"


@dataclass
class SynthSpec:
    num_segments: int = 4
    segment_len: int = 14
    H: int = 32
    W: int = 32
    include_cuts: bool = True
    include_black: bool = False
    include_static: bool = False
    distractor_prob: float = 0.25
    speed: float = 1.0


def is_black(frame: np.ndarray, level: float = 0.0) -> bool:
    return float(np.max(frame)) <= level


# --------------------------------------------------------------------------- #
# synthetic generator
# --------------------------------------------------------------------------- #

def _verb_velocity(verb: int, sprite: np.ndarray, target: np.ndarray, speed: float) -> np.ndarray:
    """Per-frame displacement (dy, dx) for a verb; constant over a segment."""
    if verb in NO_ACTION_VERBS:
        return np.zeros(2)
    if verb in (0, 1):  # approach / retract relative to the target
        d = target - sprite
        n = np.linalg.norm(d)
        d = np.array([0.0, 1.0]) if n < 1e-6 else d / n
        return speed * (d if verb == 0 else -d)
    angle = 2 * np.pi * (verb - 2) / (NUM_VERBS - 3)
    return speed * np.array([np.sin(angle), np.cos(angle)])


def _soft_disk(yy, xx, center, radius, softness=1.0):
    d = np.sqrt((yy - center[0]) ** 2 + (xx - center[1]) ** 2)
    return np.clip((radius - d) / softness + 0.5, 0.0, 1.0)


def _instrument_rgb(i: int) -> np.ndarray:
    return hsv_to_rgb([(0.08 + i / NUM_INSTRUMENTS) % 1.0, 0.9, 1.0])


def _target_rgb(t: int) -> np.ndarray:
    return hsv_to_rgb([(t / NUM_TARGETS + 0.04) % 1.0, 0.6, 0.55 + 0.3 * (t % 2)])


def _segment_background(seg: int, base_hue: float, jitter: float, include_cuts: bool) -> np.ndarray:
    if not include_cuts:
        return hsv_to_rgb([base_hue, 0.35, 0.45])
    # consecutive segments differ by ~half a hue turn and swap saturation/value levels
    hue = (base_hue + 0.5 * seg + jitter) % 1.0
    sat, val = (0.35, 0.45) if seg % 2 == 0 else (0.85, 0.95)
    return hsv_to_rgb([hue, sat, val])


def _random_triplet(rng: np.random.Generator, exclude=(), action=True) -> ActionTriplet:
    while True:
        verb = int(rng.integers(0, NUM_VERBS - 1)) if action else min(NO_ACTION_VERBS)
        trip = ActionTriplet(int(rng.integers(0, NUM_INSTRUMENTS)), verb, int(rng.integers(0, NUM_TARGETS - 1)))
        if trip not in exclude:
            return trip


def synth_video(spec: SynthSpec = SynthSpec(), seed: int = 0, name: str = "video") -> RawVideo:
    """Render a synthetic procedure video with per-frame triplet/phase annotations."""
    if spec.segment_len < CLIP_LEN:
        raise ValueError(f"segment_len must be at least {CLIP_LEN}")
    margin = TARGET_RADIUS + SPRITE_RADIUS
    if min(spec.H, spec.W) < 2 * margin + 4:
        raise ValueError(f"frames of {spec.H}x{spec.W} are too small for the sprites")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0 : spec.H, 0 : spec.W].astype(np.float64)
    lo = np.array([SPRITE_RADIUS + 1, SPRITE_RADIUS + 1])
    hi = np.array([spec.H - SPRITE_RADIUS - 2, spec.W - SPRITE_RADIUS - 2])
    base_hue = float(rng.random())
    static_seg = int(rng.integers(1, spec.num_segments)) if spec.include_static and spec.num_segments > 1 else -1

    frames, annots = [], []
    prev = None
    target_pos = rng.uniform([margin, margin], [spec.H - margin, spec.W - margin])
    for seg in range(spec.num_segments):
        trip = _random_triplet(rng, exclude={prev} if prev else (), action=seg != static_seg)
        prev = trip
        phase = int(rng.integers(0, NUM_PHASES))
        bg = _segment_background(seg, base_hue, float(rng.uniform(-0.05, 0.05)), spec.include_cuts)
        if spec.include_cuts:
            target_pos = rng.uniform([margin, margin], [spec.H - margin, spec.W - margin])
        span = spec.speed * (spec.segment_len - 1)
        sprite, vel = None, None
        for _ in range(5000):
            cand = rng.uniform(lo, hi)
            v = _verb_velocity(trip.verb, cand, target_pos, spec.speed)
            end = cand + v * (spec.segment_len - 1)
            if np.all(end >= lo) and np.all(end <= hi):
                sprite, vel = cand, v
                break
        if sprite is None:
            raise ValueError(f"cannot fit a {span:.1f}px motion path into {spec.H}x{spec.W}")
        t_rgb, i_rgb = _target_rgb(trip.target), _instrument_rgb(trip.instrument)
        t_mask = _soft_disk(yy, xx, target_pos, TARGET_RADIUS, softness=2.0)
        for k in range(spec.segment_len):
            pos = sprite + vel * k
            s_mask = _soft_disk(yy, xx, pos, SPRITE_RADIUS, softness=1.5)
            img = bg[:, None, None] * np.ones((3, spec.H, spec.W))
            img = img * (1 - t_mask) + t_rgb[:, None, None] * t_mask
            img = img * (1 - s_mask) + i_rgb[:, None, None] * s_mask
            frames.append(img.astype(np.float32))
            trips = [trip]
            while seg != static_seg and len(trips) < 3 and rng.random() < spec.distractor_prob:
                trips.append(_random_triplet(rng, exclude=set(trips)))
            annots.append(FrameAnnotation(tuple(trips), phase))

    if spec.include_black:
        at = int(rng.integers(1, len(frames)))
        for _ in range(2):
            frames.insert(at, np.zeros_like(frames[0]))
            annots.insert(at, FrameAnnotation((), annots[at - 1].phase))
    return RawVideo(np.stack(frames), annots, name=name)


# --------------------------------------------------------------------------- #
# scene cuts and clip extraction
# --------------------------------------------------------------------------- #

def content_score(frame_a: np.ndarray, frame_b: np.ndarray) -> float:
    """Mean absolute HSV difference of two ``3 x H x W`` frames, in [0, 1].

    Hue is compared on the circle and rescaled so opposite hues differ by 1.
    """
    a = np.asarray(frame_a, dtype=np.float64)
    b = np.asarray(frame_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    ha = rgb_to_hsv(np.clip(np.moveaxis(a, 0, -1), 0, 1))
    hb = rgb_to_hsv(np.clip(np.moveaxis(b, 0, -1), 0, 1))
    d = np.abs(ha - hb)
    d[..., 0] = 2.0 * np.minimum(d[..., 0], 1.0 - d[..., 0])
    return float(d.mean())


def detect_scene_cuts(video: RawVideo, threshold: float = CUT_THRESHOLD) -> List[int]:
    """Indices ``i`` whose content score against frame ``i - 1`` exceeds ``threshold``."""
    frames = video.frames if isinstance(video, RawVideo) else np.asarray(video)
    return [i for i in range(1, len(frames)) if content_score(frames[i - 1], frames[i]) > threshold]


def _window_common_triplet(annots: Sequence[FrameAnnotation], frames: np.ndarray, black_level: float):
    sets = []
    for ann, frame in zip(annots, frames):
        s = ann.defined_triplets()
        if not s or is_black(frame, black_level):
            return None
        sets.append(s)
    common = frozenset.intersection(*sets)
    return min(common) if common else None


def extract_clips(
    video: RawVideo,
    cuts: Iterable[int],
    clip_len: int = CLIP_LEN,
    stride: Optional[int] = None,
    black_level: float = 0.0,
) -> List[Clip]:
    """Tile cut-free scenes into windows and keep the ones with a shared triplet."""
    stride = clip_len if stride is None else stride
    bounds = [0] + sorted(c for c in set(cuts) if 0 < c < len(video)) + [len(video)]
    clips = []
    for start, end in zip(bounds[:-1], bounds[1:]):
        for s in range(start, end - clip_len + 1, stride):
            frames = video.frames[s : s + clip_len]
            annots = video.annotations[s : s + clip_len]
            common = _window_common_triplet(annots, frames, black_level)
            if common is not None:
                clips.append(Clip(frames.copy(), list(annots), common, source=video.name, start=s))
    return clips


def clip_violations(clip: Clip, black_level: float = 0.0) -> List[str]:
    """Human-readable list of broken clip invariants (empty when valid)."""
    problems = []
    if len(clip.frames) != len(clip.annotations):
        problems.append("frame/annotation count mismatch")
    for k, (ann, frame) in enumerate(zip(clip.annotations, clip.frames)):
        defined = ann.defined_triplets()
        if not defined:
            problems.append(f"frame {k} has no defined triplet")
        elif clip.common_triplet not in defined:
            problems.append(f"frame {k} lacks the common triplet")
        if is_black(frame, black_level):
            problems.append(f"frame {k} is black")
    return problems


def filter_static(clips: Sequence[Clip], no_action_verbs=NO_ACTION_VERBS, black_level: float = 0.0) -> List[Clip]:
    """Drop invalid clips and clips in which no frame shows an action verb."""
    kept = []
    for clip in clips:
        if clip_violations(clip, black_level):
            continue
        if all(t.verb in no_action_verbs for ann in clip.annotations for t in ann.defined_triplets()):
            continue
        kept.append(clip)
    return kept


def preprocess_video(video: RawVideo, threshold: float = CUT_THRESHOLD, **kwargs) -> List[Clip]:
    return filter_static(extract_clips(video, detect_scene_cuts(video, threshold), **kwargs))


# --------------------------------------------------------------------------- #
# on-disk stores
# --------------------------------------------------------------------------- #

def _write_png(frame: np.ndarray, path: Path) -> None:
    arr = np.round(np.clip(np.moveaxis(frame, 0, -1), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, optimize=False)


def _read_png(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.moveaxis(arr, -1, 0)


def write_frames(frames: np.ndarray, directory, pattern: str = "frame_{:02d}.png") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(frames):
        _write_png(frame, directory / pattern.format(k))


def read_frames(directory, pattern: str = "frame_*.png") -> np.ndarray:
    paths = sorted(Path(directory).glob(pattern))
    if not paths:
        raise FileNotFoundError(f"no frames matching {pattern} in {directory}")
    return np.stack([_read_png(p) for p in paths])


def write_raw_videos(videos: Sequence[RawVideo], out_dir, generator: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for video in videos:
        vdir = out / video.name
        write_frames(video.frames, vdir, "frame_{:04d}.png")
        ann = {"annotations": [a.to_json() for a in video.annotations]}
        (vdir / "annotations.json").write_text(json.dumps(ann))
        entries.append(video.name)
    manifest = {"kind": "raw_videos", "videos": entries, "generator": generator or {}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out / "manifest.json"


def _load_annotations(items) -> List[FrameAnnotation]:
    return [FrameAnnotation(tuple(a["triplets"]), int(a["phase"])) for a in items]


def read_raw_videos(in_dir) -> List[RawVideo]:
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    videos = []
    for name in manifest["videos"]:
        vdir = root / name
        ann = json.loads((vdir / "annotations.json").read_text())
        videos.append(RawVideo(read_frames(vdir, "frame_*.png"), _load_annotations(ann["annotations"]), name=name))
    return videos


def write_clip_store(clips: Sequence[Clip], out_dir, extra: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for n, clip in enumerate(clips):
        cdir_name = f"clip_{n:05d}"
        write_frames(clip.frames, out / cdir_name)
        ann = {
            "triplets": [[list(t) for t in a.triplets] for a in clip.annotations],
            "phase": [a.phase for a in clip.annotations],
            "common_triplet": list(clip.common_triplet),
            "source": clip.source,
            "start": clip.start,
        }
        (out / cdir_name / "annotation.json").write_text(json.dumps(ann))
        entries.append({"dir": cdir_name, "source": clip.source, "start": clip.start})
    manifest = {"kind": "clip_store", "clips": entries, **(extra or {})}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_clip_store(in_dir) -> List[Clip]:
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    clips = []
    for entry in manifest["clips"]:
        cdir = root / entry["dir"]
        ann = json.loads((cdir / "annotation.json").read_text())
        annots = [FrameAnnotation(tuple(t), int(p)) for t, p in zip(ann["triplets"], ann["phase"])]
        clips.append(
            Clip(
                read_frames(cdir),
                annots,
                ActionTriplet.coerce(ann["common_triplet"]),
                source=ann.get("source", entry.get("source", "")),
                start=int(ann.get("start", entry.get("start", 0))),
            )
        )
    return clips


def split_by_source(clips: Sequence[Clip], test_fraction: float = 0.2, seed: int = 0):
    """Split clips into train/test sets with disjoint source videos."""
    sources = sorted({c.source for c in clips})
    if len(sources) < 2:
        raise ValueError("need clips from at least two source videos to split")
    rng = np.random.default_rng(seed)
    order = [sources[i] for i in rng.permutation(len(sources))]
    n_test = min(len(sources) - 1, max(1, int(round(test_fraction * len(sources)))))
    test_src = set(order[:n_test])
    train = [c for c in clips if c.source not in test_src]
    test = [c for c in clips if c.source in test_src]
    return train, test


def check_disjoint(train: Sequence[Clip], test: Sequence[Clip]) -> None:
    overlap = {c.name for c in train} & {c.name for c in test}
    if overlap:
        raise ValueError(f"train and test sets share {len(overlap)} clips, e.g. {sorted(overlap)[0]}")


def spec_to_dict(spec: SynthSpec) -> dict:
    return asdict(spec)
