"""scikit-learn style wrappers around the preprocessing and the diffusion model.

``ClipExtractor`` is a stateless transformer (raw videos -> clips).
``TripletVideoDiffusion`` fits on clips and predicts videos from a first
frame plus a triplet; ``score`` returns mean PSNR of generated clips.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_clips, check_frames, check_triplets, check_videos
from .codec import CodecConfig, VideoCodec, pretrain_codec
from .data import CLIP_LEN, CUT_THRESHOLD, extract_clips, detect_scene_cuts, filter_static
from .diffusion import sample_videos
from .metrics import evaluate_pairs
from .training import TrainConfig, train


class ClipExtractor(TransformerMixin, BaseEstimator):
    """Scene-cut detection, fixed-length windowing and static-clip filtering."""

    def __init__(self, cut_threshold: float = CUT_THRESHOLD, clip_len: int = CLIP_LEN,
                 stride: Optional[int] = None, black_level: float = 0.0, drop_static: bool = True):
        self.cut_threshold = cut_threshold
        self.clip_len = clip_len
        self.stride = stride
        self.black_level = black_level
        self.drop_static = drop_static

    def fit(self, videos, y=None):
        check_videos(videos)
        if not 0.0 <= self.cut_threshold <= 1.0:
            raise ValueError("cut_threshold must lie in [0, 1]")
        if self.clip_len < 1:
            raise ValueError("clip_len must be positive")
        self.n_videos_seen_ = len(check_videos(videos))
        return self

    def transform(self, videos):
        check_is_fitted(self, "n_videos_seen_")
        clips = []
        for video in check_videos(videos):
            cuts = detect_scene_cuts(video, self.cut_threshold)
            found = extract_clips(video, cuts, self.clip_len, self.stride, self.black_level)
            if self.drop_static:
                found = filter_static(found, black_level=self.black_level)
            clips.extend(found)
        return clips


class TripletVideoDiffusion(BaseEstimator):
    """Action-triplet conditioned latent video diffusion.

    ``fit(clips)`` pretrains a codec when none is supplied and then trains the
    denoiser. ``predict(frames, triplets)`` returns ``B x K x 3 x H x W``
    videos in [0, 1].
    """

    def __init__(self, conditioning: str = "learnable", fusion: str = "linear", iterations: int = 10000,
                 learning_rate: float = 1e-5, batch_size: int = 8, loss_weighting: str = "snr",
                 steps: int = 50, num_frames: int = CLIP_LEN, codec: Optional[VideoCodec] = None,
                 codec_iterations: int = 1500, text_encoder=None, seed: int = 0):
        self.conditioning = conditioning
        self.fusion = fusion
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.loss_weighting = loss_weighting
        self.steps = steps
        self.num_frames = num_frames
        self.codec = codec
        self.codec_iterations = codec_iterations
        self.text_encoder = text_encoder
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations, learning_rate=self.learning_rate, batch_size=self.batch_size,
            seed=self.seed, conditioning_kind=self.conditioning, fusion_kind=self.fusion,
            loss_weighting=self.loss_weighting, num_frames=self.num_frames,
        )

    def fit(self, clips, y=None):
        clips = check_clips(clips)
        config = self._train_config()
        codec = self.codec
        if codec is None:
            frames = np.concatenate([c.frames for c in clips])
            codec, _ = pretrain_codec(frames, CodecConfig(), iters=self.codec_iterations, seed=self.seed)
        result = train(config, clips, codec, self.text_encoder, log_every=0)
        self.model_ = result.model
        self.loss_trace_ = np.asarray(result.losses)
        self.schedule_ = config.schedule()
        return self

    def predict(self, frames, triplets, seed: Optional[int] = None) -> np.ndarray:
        """Generate one video per conditioning frame (``B x 3 x H x W`` or ``3 x H x W``)."""
        check_is_fitted(self, "model_")
        frames = check_frames(frames)
        triplets = check_triplets(triplets, n=len(frames))
        seed = self.seed if seed is None else seed
        return sample_videos(np.moveaxis(frames, 1, -1), triplets, self.model_, self.schedule_,
                             steps=self.steps, seed=seed)

    def score(self, clips, y=None) -> float:
        """Mean per-clip PSNR of videos generated from each clip's first frame."""
        clips = check_clips(clips)
        real = np.stack([c.frames for c in clips]).astype(np.float32)
        gen = self.predict(real[:, 0], [c.common_triplet for c in clips])
        return evaluate_pairs(list(real), list(gen)).psnr_db
