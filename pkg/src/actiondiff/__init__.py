"""Action-triplet conditioned latent video diffusion for short procedure clips."""
from .data import Clip, RawVideo, SynthSpec, preprocess_video, synth_video
from .diffusion import NoiseSchedule, make_linear_schedule, sample_video
from .estimator import ClipExtractor, TripletVideoDiffusion
from .metrics import MetricsReport, frechet_distance, psnr, ssim
from .schema import ActionTriplet, FrameAnnotation
from .training import TrainConfig, evaluate, run_ablation, train

__version__ = "0.1.0"

__all__ = [
    "ActionTriplet",
    "Clip",
    "ClipExtractor",
    "FrameAnnotation",
    "MetricsReport",
    "NoiseSchedule",
    "RawVideo",
    "SynthSpec",
    "TrainConfig",
    "TripletVideoDiffusion",
    "evaluate",
    "frechet_distance",
    "make_linear_schedule",
    "preprocess_video",
    "psnr",
    "run_ablation",
    "sample_video",
    "ssim",
    "synth_video",
    "train",
]
