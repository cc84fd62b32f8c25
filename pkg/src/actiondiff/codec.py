"""Per-frame convolutional autoencoder defining the diffusion latent space."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .diffusion import NonFiniteLossError

logger = logging.getLogger(__name__)


@dataclass
class CodecConfig:
    f: int = 4
    latent_channels: int = 4
    hidden: int = 16
    identity_mode: bool = False

    def __post_init__(self):
        if self.f not in (1, 2, 4):
            raise ValueError("downsample factor f must be 1, 2 or 4")
        if self.identity_mode and (self.f != 1 or self.latent_channels < 3):
            raise ValueError("identity_mode needs f=1 and at least 3 latent channels")


class _ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1), nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1))

    def forward(self, x):
        return x + self.body(x)


class VideoCodec(nn.Module):
    """Deterministic frame encoder/decoder.

    ``encode``/``decode`` work on batches of frames ``(N, 3, H, W)``; latents are
    standardized with a per-channel shift/scale fitted after pretraining.
    """

    def __init__(self, config: CodecConfig = CodecConfig()):
        super().__init__()
        self.config = config
        c, h, n_down = config.latent_channels, config.hidden, int(math.log2(config.f))
        self.register_buffer("shift", torch.zeros(c))
        self.register_buffer("scale", torch.ones(c))
        if config.identity_mode:
            self.encoder = self.decoder = None
            return
        w = 2 * h
        enc: List[nn.Module] = [nn.Conv2d(3, h, 3, padding=1), nn.SiLU()]
        ch = h
        for _ in range(n_down):
            enc += [nn.Conv2d(ch, w, 4, stride=2, padding=1), nn.SiLU(), _ResBlock(w)]
            ch = w
        enc += [_ResBlock(ch), nn.Conv2d(ch, c, 1)]
        dec: List[nn.Module] = [nn.Conv2d(c, w, 3, padding=1), _ResBlock(w), _ResBlock(w)]
        ch = w
        for i in range(n_down):
            out = h if i == n_down - 1 else w
            dec += [nn.ConvTranspose2d(w, out, 4, stride=2, padding=1), nn.SiLU()]
            ch = out
        dec += [nn.Conv2d(ch, 3, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)
        self.decoder = nn.Sequential(*dec)

    def _check_frames(self, frames: torch.Tensor) -> None:
        if frames.dim() != 4 or frames.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) frames, got {tuple(frames.shape)}")
        f = self.config.f
        if frames.shape[-1] % f or frames.shape[-2] % f:
            raise ValueError(f"frame size {tuple(frames.shape[-2:])} not divisible by f={f}")

    def encode_raw(self, frames: torch.Tensor) -> torch.Tensor:
        self._check_frames(frames)
        if self.config.identity_mode:
            pad = self.config.latent_channels - 3
            return torch.cat([frames, frames.new_zeros(frames.shape[0], pad, *frames.shape[2:])], dim=1)
        return self.encoder(frames * 2.0 - 1.0)

    def _check_latent(self, lat: torch.Tensor) -> None:
        if lat.dim() != 4 or lat.shape[1] != self.config.latent_channels:
            raise ValueError(
                f"latent has {lat.shape[1] if lat.dim() == 4 else '?'} channels, "
                f"codec expects {self.config.latent_channels}"
            )

    def decode_raw(self, lat: torch.Tensor) -> torch.Tensor:
        self._check_latent(lat)
        if self.config.identity_mode:
            return lat[:, :3]
        return (self.decoder(lat) + 1.0) * 0.5

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        lat = self.encode_raw(frames)
        if self.config.identity_mode:
            return lat
        return (lat - self.shift.view(1, -1, 1, 1)) / self.scale.view(1, -1, 1, 1)

    def decode(self, lat: torch.Tensor) -> torch.Tensor:
        self._check_latent(lat)
        if not self.config.identity_mode:
            lat = lat * self.scale.view(1, -1, 1, 1) + self.shift.view(1, -1, 1, 1)
        return self.decode_raw(lat).clamp(0.0, 1.0)

    @torch.no_grad()
    def fit_latent_stats(self, frames: torch.Tensor) -> None:
        if self.config.identity_mode:
            return
        lat = self.encode_raw(frames)
        self.shift.copy_(lat.mean(dim=(0, 2, 3)))
        self.scale.copy_(lat.std(dim=(0, 2, 3)).clamp_min(1e-6))


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float32))


@torch.no_grad()
def encode_video(frames, codec: VideoCodec) -> torch.Tensor:
    """``(K, 3, H, W)`` or ``(B, K, 3, H, W)`` frames -> latents with matching leading dims."""
    frames = _as_tensor(frames)
    lead = frames.shape[:-3]
    lat = codec.encode(frames.reshape(-1, *frames.shape[-3:]))
    return lat.reshape(*lead, *lat.shape[1:])


@torch.no_grad()
def decode_video(lat, codec: VideoCodec) -> torch.Tensor:
    lat = _as_tensor(lat)
    lead = lat.shape[:-3]
    out = codec.decode(lat.reshape(-1, *lat.shape[-3:]))
    return out.reshape(*lead, *out.shape[1:])


def pretrain_codec(
    frames,
    config: CodecConfig = CodecConfig(),
    iters: int = 1500,
    seed: int = 0,
    batch_size: int = 32,
    lr: float = 2e-3,
    codec: Optional[VideoCodec] = None,
) -> Tuple[VideoCodec, List[float]]:
    """Train the autoencoder with an L2 reconstruction loss.

    ``frames`` is any array whose trailing dims are ``(3, H, W)``.  Returns the
    codec and the per-iteration loss curve.
    """
    torch.manual_seed(seed)
    codec = VideoCodec(config) if codec is None else codec
    data = _as_tensor(frames)
    data = data.reshape(-1, *data.shape[-3:])
    if config.identity_mode:
        return codec, []
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(iters, 1), eta_min=lr * 0.05)
    losses = []
    codec.train()
    for it in range(iters):
        idx = torch.randint(0, len(data), (batch_size,), generator=gen)
        batch = data[idx]
        loss = ((codec.decode_raw(codec.encode_raw(batch)) - batch) ** 2).mean()
        if not torch.isfinite(loss):
            raise NonFiniteLossError(f"codec loss diverged at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        if it % 250 == 0:
            logger.info("codec iter %d loss %.5f", it, losses[-1])
    codec.eval()
    if iters > 0:
        codec.fit_latent_stats(data)
    return codec, losses


def codec_config_dict(config: CodecConfig) -> dict:
    return asdict(config)
