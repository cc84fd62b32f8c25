"""Noise schedules, forward/reverse diffusion steps, the denoising loss and the
conditional video sampler.

Timesteps are 1-based throughout the public API (``1 <= t <= T``); the schedule
arrays are stored 0-based, so ``beta[t]`` in the math is ``sched.beta[t - 1]``
in code.  ``alpha_bar`` at ``t = 0`` is defined as 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

__all__ = [
    "NoiseSchedule",
    "DiffusionState",
    "NonFiniteLossError",
    "make_linear_schedule",
    "forward_step",
    "forward_marginal",
    "reverse_step",
    "training_loss",
    "strided_timesteps",
    "sample_video",
    "sample_videos",
]


class NonFiniteLossError(FloatingPointError):
    """Raised when the denoising loss is NaN or infinite."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-preserving discrete schedule.

    ``timesteps`` maps schedule positions to the timestep the denoiser was trained
    on.  It is ``1..T`` for a plain schedule and a strided subset for a respaced one.
    """

    beta: np.ndarray
    w: np.ndarray = field(default=None)  # type: ignore[assignment]
    timesteps: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size == 0:
            raise ValueError("beta must be a non-empty 1-D array")
        if not np.all((beta > 0) & (beta < 1)):
            raise ValueError("all beta entries must lie in (0, 1)")
        object.__setattr__(self, "beta", beta)
        w = np.ones_like(beta) if self.w is None else np.asarray(self.w, dtype=np.float64)
        if w.shape != beta.shape:
            raise ValueError("loss weights must match the schedule length")
        object.__setattr__(self, "w", w)
        ts = np.arange(1, beta.size + 1) if self.timesteps is None else np.asarray(self.timesteps)
        object.__setattr__(self, "timesteps", ts.astype(np.int64))

    @property
    def T(self) -> int:
        return int(self.beta.size)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar)

    def alpha_bar_at(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def posterior_sigma(self, t: int) -> float:
        self._check_t(t)
        if t == 1:
            return 0.0
        beta = self.beta[t - 1]
        return float(np.sqrt(beta * (1.0 - self.alpha_bar_at(t - 1)) / (1.0 - self.alpha_bar_at(t))))

    def with_weights(self, kind: str, gamma: float = 5.0) -> "NoiseSchedule":
        """Return a copy with loss weights ``'unit'`` (all ones), ``'snr'`` or ``'min_snr'``.

        ``'snr'`` sets ``w = alpha_bar / sigma**2``, which makes the x-space loss
        equal to the plain noise-prediction MSE.  ``'min_snr'`` caps that weight
        at ``gamma`` so nearly clean steps do not dominate.
        """
        snr = self.alpha_bar / self.sigma**2
        if kind == "unit":
            w = np.ones_like(self.beta)
        elif kind == "snr":
            w = snr
        elif kind == "min_snr":
            w = np.minimum(snr, gamma)
        else:
            raise ValueError(f"unknown loss weighting {kind!r}")
        return NoiseSchedule(self.beta, w, self.timesteps)

    def respace(self, timesteps) -> "NoiseSchedule":
        """Sub-schedule visiting only ``timesteps`` (ascending, 1-based).

        The derived betas reproduce ``alpha_bar`` exactly at the kept steps, so the
        single-step reverse update applies unchanged on the respaced chain.
        """
        ts = np.asarray(sorted(set(int(t) for t in timesteps)), dtype=np.int64)
        if ts.size == 0 or ts[0] < 1 or ts[-1] > self.T:
            raise ValueError("respaced timesteps must lie in [1, T]")
        ab = self.alpha_bar[ts - 1]
        prev = np.concatenate([[1.0], ab[:-1]])
        beta = 1.0 - ab / prev
        return NoiseSchedule(beta, self.w[ts - 1], self.timesteps[ts - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")


@dataclass
class DiffusionState:
    z: torch.Tensor
    t: int


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be at least 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what} shape {tuple(b.shape)} does not match {tuple(a.shape)}")


def forward_step(z_prev: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """One Markov noising step ``z_{t-1} -> z_t``."""
    _check_shapes(z_prev, eps, "eps")
    sched._check_t(t)
    beta = float(sched.beta[t - 1])
    return np.sqrt(1.0 - beta) * z_prev + np.sqrt(beta) * eps


def forward_marginal(z0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form ``q(z_t | z_0)`` sample."""
    _check_shapes(z0, eps, "eps")
    sched._check_t(t)
    ab = sched.alpha_bar_at(t)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def reverse_step(
    z_t: torch.Tensor,
    t: int,
    eps_hat: torch.Tensor,
    sched: NoiseSchedule,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Ancestral update ``z_t -> z_{t-1}`` from a noise prediction."""
    _check_shapes(z_t, eps_hat, "eps_hat")
    sched._check_t(t)
    beta = float(sched.beta[t - 1])
    sigma = float(sched.sigma[t - 1])
    mean = (z_t - (beta / sigma) * eps_hat) / np.sqrt(1.0 - beta)
    if t == 1 or noise is None:
        return mean
    _check_shapes(z_t, noise, "noise")
    return mean + sched.posterior_sigma(t) * noise


def _per_sample(values: np.ndarray, idx: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    out = torch.as_tensor(values, dtype=like.dtype)[idx]
    return out.view(-1, *([1] * (like.dim() - 1)))


def training_loss(
    x: torch.Tensor,
    cond,
    model: Callable,
    sched: NoiseSchedule,
    rng: torch.Generator,
    t: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Weighted x-space reconstruction loss for a batch of latent videos.

    ``x`` is ``(B, K, C, h, w)``.  The model predicts noise; the clean latent is
    recovered as ``(z_t - sigma_t * eps_hat) / sqrt(alpha_bar_t)`` and compared
    with ``x``.  ``t`` is drawn uniformly from ``1..T`` per sample unless given.
    """
    B = x.shape[0]
    if t is None:
        t = torch.randint(1, sched.T + 1, (B,), generator=rng)
    eps = torch.randn(x.shape, generator=rng, dtype=x.dtype)
    idx = t.long() - 1
    sqrt_ab = _per_sample(np.sqrt(sched.alpha_bar), idx, x)
    sig = _per_sample(sched.sigma, idx, x)
    z_t = sqrt_ab * x + sig * eps
    model_t = torch.as_tensor(sched.timesteps, dtype=torch.long)[idx]
    eps_hat = model(z_t, model_t, cond)
    x_hat = (z_t - sig * eps_hat) / sqrt_ab
    per_item = ((x_hat - x) ** 2).flatten(1).mean(dim=1)
    w = torch.as_tensor(sched.w, dtype=x.dtype)[idx]
    loss = (w * per_item).mean()
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {loss.item()}")
    return loss


def strided_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly strided ascending subset of ``1..T`` that always contains ``T`` and 1."""
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if steps > T:
        raise ValueError(f"steps ({steps}) exceeds T ({T})")
    return np.unique(np.round(np.linspace(1, T, steps)).astype(np.int64))


@torch.no_grad()
def sample_video(x0_frame, triplet, bundle, sched: NoiseSchedule, steps: int = 50, seed: int = 0) -> np.ndarray:
    """Generate a ``K x 3 x H x W`` clip from one RGB frame (``H x W x 3``) and a triplet.

    ``bundle`` is a :class:`actiondiff.model.VideoDiffusionModel` (anything with
    ``condition``, ``predict_noise``, ``codec`` and ``num_frames``).
    """
    frame = np.asarray(x0_frame, dtype=np.float32)
    if frame.ndim != 3 or frame.shape[-1] != 3:
        raise ValueError("x0_frame must be H x W x 3")
    if steps <= 0:
        raise ValueError("steps must be positive")
    videos = sample_videos(frame[None], [triplet], bundle, sched, steps=steps, seed=seed)
    return videos[0]


@torch.no_grad()
def sample_videos(frames, triplets, bundle, sched: NoiseSchedule, steps: int = 50, seed: int = 0) -> np.ndarray:
    """Batched :func:`sample_video`; ``frames`` is ``(B, H, W, 3)``.

    Each item draws its noise from its own generator seeded ``seed + i``, so
    the noise an item sees does not depend on batch composition (outputs agree
    with per-item sampling up to float rounding in batched kernels).
    """
    frames = torch.as_tensor(np.asarray(frames, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()
    B = frames.shape[0]
    K = bundle.num_frames
    sub = sched.respace(strided_timesteps(sched.T, steps))
    cond = bundle.condition(frames, triplets)
    frame_lat = cond.frame_latent
    z0_tiled = frame_lat.unsqueeze(1).expand(-1, K, -1, -1, -1)
    gens = [torch.Generator().manual_seed(int(seed) + i) for i in range(B)]

    def randn_like(ref):
        return torch.stack([torch.randn(ref.shape[1:], generator=g) for g in gens])

    offset = bundle.latent_offset(cond) if hasattr(bundle, "latent_offset") else torch.zeros_like(z0_tiled)
    z = forward_marginal(z0_tiled - offset, sub.T, randn_like(z0_tiled), sub)
    for i in range(sub.T, 0, -1):
        t_model = torch.full((B,), int(sub.timesteps[i - 1]), dtype=torch.long)
        eps_hat = bundle.predict_noise(z, t_model, cond)
        noise = randn_like(z) if i > 1 else None
        z = reverse_step(z, i, eps_hat, sub, noise)
    z = z + offset
    video = bundle.codec.decode(z.reshape(B * K, *z.shape[2:]))
    return video.reshape(B, K, *video.shape[1:]).clamp(0.0, 1.0).numpy()
