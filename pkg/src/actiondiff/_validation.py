"""Input checks shared by the estimator wrappers and the command line."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import Clip, RawVideo
from .schema import ActionTriplet


def check_frames(frames, *, channels_last: bool = False, name: str = "frames") -> np.ndarray:
    """Return ``frames`` as a finite float32 batch with values in [0, 1].

    Accepts one frame or a batch; the result always has a leading batch axis.
    """
    arr = np.asarray(frames, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"{name} must be a frame or a batch of frames, got shape {arr.shape}")
    axis = -1 if channels_last else 1
    if arr.shape[axis] != 3:
        layout = "B x H x W x 3" if channels_last else "B x 3 x H x W"
        raise ValueError(f"{name} must be laid out {layout}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contain non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} must lie in [0, 1]")
    return arr


def check_triplets(triplets, n: int = None) -> list:
    """Coerce and validate a sequence of triplets; a single triplet is wrapped."""
    if isinstance(triplets, (str, ActionTriplet)) or (
        isinstance(triplets, tuple) and len(triplets) == 3 and all(isinstance(v, (int, np.integer)) for v in triplets)
    ):
        triplets = [triplets]
    out = []
    for t in triplets:
        trip = ActionTriplet.coerce(t)
        if not trip.is_defined:
            raise ValueError(f"triplet {trip} is undefined and cannot condition generation")
        trip.validate()
        out.append(trip)
    if n is not None and len(out) != n:
        raise ValueError(f"got {len(out)} triplets for {n} frames")
    return out


def check_clips(clips: Sequence[Clip], min_count: int = 1) -> list:
    clips = list(clips)
    if len(clips) < min_count:
        raise ValueError(f"need at least {min_count} clips, got {len(clips)}")
    for c in clips:
        if not isinstance(c, Clip):
            raise TypeError(f"expected Clip objects, got {type(c).__name__}")
    shapes = {c.frames.shape for c in clips}
    if len(shapes) != 1:
        raise ValueError(f"clips have mixed shapes: {sorted(shapes)}")
    return clips


def check_videos(videos) -> list:
    if isinstance(videos, RawVideo):
        videos = [videos]
    videos = list(videos)
    for v in videos:
        if not isinstance(v, RawVideo):
            raise TypeError(f"expected RawVideo objects, got {type(v).__name__}")
    return videos

