"""Video noise predictor: per-frame residual conv blocks, each followed by
attention across the frame axis at every spatial site."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn


@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    base_channels: int = 32
    depth: int = 3
    cond_dim: int = 64
    time_embed_dim: int = 64
    temporal_enabled: bool = True
    num_frames: int = 7
    frame_channels: int = 4  # conditioning-frame latent concatenated to the input; 0 disables
    temporal_heads: int = 4

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.cond_dim <= 0:
            raise ValueError("cond_dim must be positive")
        if self.base_channels % 8:
            raise ValueError("base_channels must be a multiple of 8 (group norm)")


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class SpatialBlock(nn.Module):
    """Residual conv block applied to each frame independently."""

    def __init__(self, ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, 2 * ch)
        self.norm2 = nn.GroupNorm(8, ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        scale, shift = self.emb(emb)[:, :, None, None].chunk(2, dim=1)
        h = self.conv2(self.act(self.norm2(h) * (1 + scale) + shift))
        return x + h


class TemporalAttention(nn.Module):
    """Self-attention over the K frames at each spatial location."""

    def __init__(self, ch: int, num_frames: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(ch)
        self.frame_pos = nn.Parameter(torch.randn(num_frames, ch) * 0.02)
        self.attn = nn.MultiheadAttention(ch, heads, batch_first=True)

    def forward(self, x: torch.Tensor, B: int, K: int) -> torch.Tensor:
        _, C, h, w = x.shape
        seq = x.view(B, K, C, h * w).permute(0, 3, 1, 2).reshape(B * h * w, K, C)
        q = self.norm(seq + self.frame_pos[:K])
        seq = seq + self.attn(q, q, q, need_weights=False)[0]
        return seq.view(B, h * w, K, C).permute(0, 2, 3, 1).reshape(B * K, C, h, w)


class VideoDenoiser(nn.Module):
    def __init__(self, config: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.config = config
        ch, e = config.base_channels, config.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.cond_mlp = nn.Sequential(nn.Linear(config.cond_dim, e), nn.SiLU(), nn.Linear(e, e))
        # displacement grows with the frame index, so each frame's blocks are told which one they are
        self.frame_embed = nn.Embedding(config.num_frames, e)
        self.joint_mlp = nn.Sequential(nn.SiLU(), nn.Linear(e, e), nn.SiLU())
        self.stem = nn.Conv2d(config.latent_channels + config.frame_channels, ch, 3, padding=1)
        self.spatial = nn.ModuleList(SpatialBlock(ch, e) for _ in range(config.depth))
        self.temporal = nn.ModuleList(
            TemporalAttention(ch, config.num_frames, config.temporal_heads) for _ in range(config.depth)
        )
        self.out_norm = nn.GroupNorm(8, ch)
        self.out = nn.Conv2d(ch, config.latent_channels, 3, padding=1)

    def forward(self, z: torch.Tensor, t: torch.Tensor, cond: torch.Tensor, frame_latent=None) -> torch.Tensor:
        """``z`` is ``(B, K, C, h, w)``; returns a noise prediction of the same shape."""
        cfg = self.config
        if z.dim() != 5:
            raise ValueError(f"expected (B, K, C, h, w) latents, got {tuple(z.shape)}")
        B, K, C, h, w = z.shape
        if cond.shape[-1] != cfg.cond_dim:
            raise ValueError(f"conditioning width {cond.shape[-1]} != cond_dim {cfg.cond_dim}")
        if K > cfg.num_frames:
            raise ValueError(f"{K} frames exceed the configured {cfg.num_frames}")
        t = torch.as_tensor(t).reshape(-1).expand(B) if torch.as_tensor(t).numel() == 1 else torch.as_tensor(t)
        emb = self.time_mlp(timestep_embedding(t, cfg.time_embed_dim).to(z.dtype)) + self.cond_mlp(cond)
        emb = self.joint_mlp((emb[:, None, :] + self.frame_embed.weight[None, :K]).reshape(B * K, -1))
        x = z.reshape(B * K, C, h, w)
        if cfg.frame_channels:
            if frame_latent is None:
                raise ValueError("this denoiser expects a conditioning-frame latent")
            fl = frame_latent.unsqueeze(1).expand(B, K, *frame_latent.shape[1:]).reshape(B * K, -1, h, w)
            x = torch.cat([x, fl], dim=1)
        x = self.stem(x)
        for spatial, temporal in zip(self.spatial, self.temporal):
            x = spatial(x, emb)
            if cfg.temporal_enabled:
                x = temporal(x, B, K)
        x = self.out(torch.nn.functional.silu(self.out_norm(x)))
        return x.view(B, K, C, h, w)


def denoise(z_t, t, cond, model: VideoDenoiser) -> torch.Tensor:
    """Noise prediction for ``z_t`` under fused conditioning ``cond``."""
    return model(z_t, t, cond.vector, cond.frame_latent)


def denoiser_config_dict(config: DenoiserConfig) -> dict:
    return asdict(config)
