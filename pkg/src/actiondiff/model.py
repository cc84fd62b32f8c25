"""The conditional video diffusion bundle: codec, encoders, fusion and denoiser."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
from torch import nn

from .codec import VideoCodec
from .conditioning import (
    CONDITIONING_KINDS,
    FUSION_KINDS,
    FusedConditioning,
    ImageEncoder,
    LearnableTripletEncoder,
    NullTripletEncoder,
    TextTripletEncoder,
    make_fusion,
)
from .denoiser import DenoiserConfig, VideoDenoiser


@dataclass
class ModelConfig:
    conditioning: str = "learnable"
    fusion: str = "linear"
    token_dim: int = 64
    image_size: tuple = (32, 32)
    # diffuse the offset from the tiled conditioning-frame latent instead of the raw latent
    frame_residual: bool = True
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)

    def __post_init__(self):
        if self.conditioning not in CONDITIONING_KINDS:
            raise ValueError(f"conditioning must be one of {CONDITIONING_KINDS}, got {self.conditioning!r}")
        if self.fusion not in FUSION_KINDS:
            raise ValueError(f"fusion must be one of {FUSION_KINDS}, got {self.fusion!r}")
        if isinstance(self.denoiser, dict):
            self.denoiser = DenoiserConfig(**self.denoiser)
        self.image_size = tuple(self.image_size)

    def to_dict(self) -> dict:
        return asdict(self)


class VideoDiffusionModel(nn.Module):
    """Everything :func:`actiondiff.diffusion.sample_video` needs.

    The codec is frozen.  A text encoder is required for the ``text`` and
    ``text_finetuned`` conditioning kinds; its trainability follows the kind.
    """

    def __init__(self, config: ModelConfig, codec: VideoCodec, text_encoder: Optional[TextTripletEncoder] = None):
        super().__init__()
        self.config = config
        d = config.token_dim
        self.codec = codec
        for p in self.codec.parameters():
            p.requires_grad_(False)
        self.image_encoder = ImageEncoder(d, config.image_size)
        if config.conditioning == "none":
            self.triplet_encoder = NullTripletEncoder(d)
        elif config.conditioning == "learnable":
            self.triplet_encoder = LearnableTripletEncoder(d)
        else:
            if text_encoder is None:
                raise ValueError(f"conditioning {config.conditioning!r} needs a pretrained text encoder")
            text_encoder.set_finetune(config.conditioning == "text_finetuned")
            self.triplet_encoder = text_encoder
        self.fusion = make_fusion(config.fusion, d, config.denoiser.cond_dim)
        self.denoiser = VideoDenoiser(config.denoiser)

    @property
    def num_frames(self) -> int:
        return self.config.denoiser.num_frames

    def condition(self, frames: torch.Tensor, triplets) -> FusedConditioning:
        """Fuse ``(B, 3, H, W)`` conditioning frames with their triplets."""
        img = self.image_encoder(frames)
        trip = self.triplet_encoder(list(triplets))
        fused = self.fusion(img, trip)
        with torch.no_grad():
            fused.frame_latent = self.codec.encode(frames)
        return fused

    def latent_offset(self, cond: FusedConditioning) -> torch.Tensor:
        """``(B, K, C, h, w)`` tensor subtracted from clean latents before diffusion."""
        base = cond.frame_latent.unsqueeze(1).expand(-1, self.num_frames, -1, -1, -1)
        return base if self.config.frame_residual else torch.zeros_like(base)

    def forward(self, z: torch.Tensor, t: torch.Tensor, cond: FusedConditioning) -> torch.Tensor:
        """Noise prediction; makes the bundle usable directly as the loss's model callable."""
        return self.denoiser(z, t, cond.vector, cond.frame_latent)

    predict_noise = forward

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]
