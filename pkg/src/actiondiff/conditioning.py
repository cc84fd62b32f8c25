"""Triplet encoders, the conditioning-frame encoder and feature fusion.

Two triplet encoders are provided: per-slot learnable embedding tables, and a
small text encoder over the lexicon words that can be frozen or fine-tuned.
A learned null token stands in for "no triplet" in the unconditioned baseline.
Fusion combines image tokens with triplet tokens either by pooled
concatenation plus an affine map, or by single-head cross-attention with the
query taken from either side.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .schema import (
    DEFAULT_LEXICON,
    NUM_INSTRUMENTS,
    NUM_TARGETS,
    NUM_VERBS,
    ActionTriplet,
    caption,
)

logger = logging.getLogger(__name__)

CONDITIONING_KINDS = ("none", "learnable", "text", "text_finetuned")
FUSION_KINDS = ("linear", "attn_image_query", "attn_triplet_query")


@dataclass
class TripletTokens:
    tokens: torch.Tensor  # (B, 3, d)
    source: str


@dataclass
class FusedConditioning:
    vector: torch.Tensor  # (B, cond_dim)
    kind: str
    frame_latent: Optional[torch.Tensor] = None  # (B, C, h, w), concatenated into the denoiser input
    attention: Optional[torch.Tensor] = None

    @property
    def width(self) -> int:
        return int(self.vector.shape[-1])


def triplet_ids(triplets) -> torch.Tensor:
    """Validate triplets and stack them into a ``(B, 3)`` long tensor."""
    if isinstance(triplets, torch.Tensor):
        ids = triplets.long().view(-1, 3)
        triplets = [ActionTriplet(*map(int, row)) for row in ids.tolist()]
    trips = [ActionTriplet.coerce(t).validate() for t in triplets]
    return torch.tensor([list(t) for t in trips], dtype=torch.long).view(-1, 3)


# --------------------------------------------------------------------------- #
# triplet encoders
# --------------------------------------------------------------------------- #

class LearnableTripletEncoder(nn.Module):
    """One embedding table per triplet slot (6 x d, 10 x d, 15 x d)."""

    source = "learnable"

    def __init__(self, dim: int):
        super().__init__()
        self.instrument = nn.Embedding(NUM_INSTRUMENTS, dim)
        self.verb = nn.Embedding(NUM_VERBS, dim)
        self.target = nn.Embedding(NUM_TARGETS, dim)
        for emb in (self.instrument, self.verb, self.target):
            nn.init.normal_(emb.weight, std=0.5)

    def forward(self, triplets) -> torch.Tensor:
        ids = triplet_ids(triplets)
        return torch.stack([self.instrument(ids[:, 0]), self.verb(ids[:, 1]), self.target(ids[:, 2])], dim=1)


class NullTripletEncoder(nn.Module):
    """Learned triplet-independent tokens for the unconditioned baseline."""

    source = "none"

    def __init__(self, dim: int):
        super().__init__()
        self.null = nn.Parameter(torch.zeros(3, dim))

    def forward(self, triplets) -> torch.Tensor:
        n = len(triplets) if not isinstance(triplets, torch.Tensor) else triplets.view(-1, 3).shape[0]
        return self.null.unsqueeze(0).expand(n, -1, -1)


class TextTripletEncoder(nn.Module):
    """Word embeddings plus one self-attention layer over the rendered caption."""

    def __init__(self, dim: int, lexicon: dict = DEFAULT_LEXICON, heads: int = 4, finetune: bool = False):
        super().__init__()
        self.lexicon = {k: list(v) for k, v in lexicon.items()}
        words = sorted({w for slot in ("instrument", "verb", "target") for w in self.lexicon[slot]})
        self.vocab = {w: i for i, w in enumerate(words)}
        self.words = nn.Embedding(len(words), dim)
        self.position = nn.Parameter(torch.randn(3, dim) * 0.02)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        self.set_finetune(finetune)

    @property
    def source(self) -> str:
        return "text_finetuned" if self.finetune else "text"

    def set_finetune(self, finetune: bool) -> None:
        self.finetune = bool(finetune)
        for p in self.parameters():
            p.requires_grad_(self.finetune)

    def token_ids(self, triplets) -> torch.Tensor:
        rows = []
        for trip in triplets:
            words = caption(trip, self.lexicon)
            rows.append([self.vocab[w] for w in words])
        return torch.tensor(rows, dtype=torch.long)

    def word_embeddings(self, triplets) -> torch.Tensor:
        """Embeddings before positional encoding and self-attention."""
        return self.words(self.token_ids(triplets))

    def forward(self, triplets) -> torch.Tensor:
        if isinstance(triplets, torch.Tensor):
            triplets = [ActionTriplet(*map(int, r)) for r in triplets.view(-1, 3).tolist()]
        x = self.word_embeddings(triplets) + self.position
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


def encode_triplet_learnable(triplet, table: LearnableTripletEncoder) -> TripletTokens:
    trips = [triplet] if isinstance(triplet, (ActionTriplet, tuple)) and len(triplet) == 3 and not isinstance(triplet[0], (tuple, list)) else triplet
    return TripletTokens(table(trips), "learnable")


def encode_triplet_text(triplet, text_encoder: TextTripletEncoder, finetune: Optional[bool] = None) -> TripletTokens:
    if finetune is not None and finetune != text_encoder.finetune:
        text_encoder.set_finetune(finetune)
    trips = [triplet] if isinstance(triplet, (ActionTriplet, tuple)) and len(triplet) == 3 and not isinstance(triplet[0], (tuple, list)) else triplet
    return TripletTokens(text_encoder(trips), text_encoder.source)


# --------------------------------------------------------------------------- #
# conditioning-frame encoder
# --------------------------------------------------------------------------- #

class ImageEncoder(nn.Module):
    """Conv tower turning an ``H x W`` frame into ``(H/8)*(W/8)`` tokens of width ``dim``."""

    def __init__(self, dim: int, image_size: Tuple[int, int] = (32, 32), hidden: int = 32):
        super().__init__()
        H, W = image_size
        if H % 8 or W % 8:
            raise ValueError("image size must be divisible by 8")
        self.image_size = (H, W)
        self.net = nn.Sequential(
            nn.Conv2d(3, hidden, 3, stride=2, padding=1, bias=False),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, dim, 3, stride=2, padding=1),
        )
        self.num_tokens = (H // 8) * (W // 8)
        self.position = nn.Parameter(torch.randn(self.num_tokens, dim) * 0.02)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """``(B, 3, H, W)`` in [0, 1] -> ``(B, m, dim)``."""
        if frames.dim() != 4 or frames.shape[1] != 3 or tuple(frames.shape[-2:]) != self.image_size:
            raise ValueError(f"expected (B, 3, {self.image_size[0]}, {self.image_size[1]}) frames, got {tuple(frames.shape)}")
        feat = self.net(frames)
        return feat.flatten(2).transpose(1, 2) + self.position


def encode_cond_frame(x0, image_encoder: ImageEncoder) -> torch.Tensor:
    """One ``H x W x 3`` frame -> ``m x d`` image tokens."""
    frame = torch.as_tensor(np.asarray(x0, dtype=np.float32))
    if frame.dim() != 3 or frame.shape[-1] != 3:
        raise ValueError(f"expected an H x W x 3 frame, got {tuple(frame.shape)}")
    return image_encoder(frame.permute(2, 0, 1).unsqueeze(0))[0]


# --------------------------------------------------------------------------- #
# fusion
# --------------------------------------------------------------------------- #

def _batched(x: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    return (x.unsqueeze(0), True) if x.dim() == 2 else (x, False)


class LinearFusion(nn.Module):
    kind = "linear"

    def __init__(self, dim: int, cond_dim: int):
        super().__init__()
        self.dim = dim
        self.proj = nn.Linear(2 * dim, cond_dim)

    def forward(self, img: torch.Tensor, trip: torch.Tensor) -> FusedConditioning:
        img, single = _batched(img)
        trip, _ = _batched(trip)
        if img.shape[-1] != self.dim or trip.shape[-1] != self.dim:
            raise ValueError(f"token widths {img.shape[-1]}, {trip.shape[-1]} differ from {self.dim}")
        vec = self.proj(torch.cat([img.mean(dim=1), trip.mean(dim=1)], dim=-1))
        return FusedConditioning(vec[0] if single else vec, self.kind)


class CrossAttentionFusion(nn.Module):
    """Single-head scaled dot-product attention, mean-pooled over queries."""

    def __init__(self, dim: int, cond_dim: int, query_source: str = "image"):
        super().__init__()
        if query_source not in ("image", "triplet"):
            raise ValueError("query_source must be 'image' or 'triplet'")
        self.dim = dim
        self.query_source = query_source
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, cond_dim)

    @property
    def kind(self) -> str:
        return "attn_image_query" if self.query_source == "image" else "attn_triplet_query"

    def attend(self, queries: torch.Tensor, keys: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if queries.shape[-2] == 0 or keys.shape[-2] == 0:
            raise ValueError("cross-attention needs at least one query and one key token")
        q, k, v = self.q(queries), self.k(keys), self.v(keys)
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.dim), dim=-1)
        return weights @ v, weights

    def forward(self, img: torch.Tensor, trip: torch.Tensor) -> FusedConditioning:
        img, single = _batched(img)
        trip, _ = _batched(trip)
        if img.shape[-1] != self.dim or trip.shape[-1] != self.dim:
            raise ValueError(f"token widths {img.shape[-1]}, {trip.shape[-1]} differ from {self.dim}")
        queries, keys = (img, trip) if self.query_source == "image" else (trip, img)
        mixed, weights = self.attend(queries, keys)
        vec = self.out(mixed.mean(dim=1))
        if single:
            vec, weights = vec[0], weights[0]
        return FusedConditioning(vec, self.kind, attention=weights)


def make_fusion(kind: str, dim: int, cond_dim: int) -> nn.Module:
    if kind == "linear":
        return LinearFusion(dim, cond_dim)
    if kind == "attn_image_query":
        return CrossAttentionFusion(dim, cond_dim, "image")
    if kind == "attn_triplet_query":
        return CrossAttentionFusion(dim, cond_dim, "triplet")
    raise ValueError(f"unknown fusion kind {kind!r}; choose from {FUSION_KINDS}")


def fuse_linear(img, trip, fusion: LinearFusion) -> FusedConditioning:
    return fusion(img, trip.tokens if isinstance(trip, TripletTokens) else trip)


def fuse_cross_attention(img, trip, fusion: CrossAttentionFusion) -> FusedConditioning:
    return fusion(img, trip.tokens if isinstance(trip, TripletTokens) else trip)


# --------------------------------------------------------------------------- #
# text-encoder pretraining
# --------------------------------------------------------------------------- #

class ClipMotionEncoder(nn.Module):
    """Embeds a clip from its first frame and its frame differences."""

    def __init__(self, dim: int, num_frames: int = 7, hidden: int = 32):
        super().__init__()
        in_ch = 3 * num_frames + 3 * (num_frames - 1)
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, hidden, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(hidden, dim),
        )

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        diffs = (clips[:, 1:] - clips[:, :-1]) * 4.0
        x = torch.cat([clips.flatten(1, 2), diffs.flatten(1, 2)], dim=1)
        return self.net(x)


def pretrain_text_encoder(
    clips: Sequence,
    dim: int = 64,
    iters: int = 300,
    seed: int = 0,
    batch_size: int = 32,
    lr: float = 2e-3,
    temperature: float = 0.1,
    lexicon: dict = DEFAULT_LEXICON,
) -> Tuple[TextTripletEncoder, List[float]]:
    """Contrastive caption/clip pretraining of a :class:`TextTripletEncoder`.

    ``clips`` are objects with ``frames`` (``K x 3 x H x W``) and ``common_triplet``.
    The returned encoder is frozen; call ``set_finetune(True)`` to train it further.
    """
    torch.manual_seed(seed)
    text = TextTripletEncoder(dim, lexicon, finetune=True)
    video = ClipMotionEncoder(dim, num_frames=len(clips[0].frames))
    text_proj = nn.Linear(dim, dim)
    frames = torch.as_tensor(np.stack([c.frames for c in clips]).astype(np.float32))
    trips = [c.common_triplet for c in clips]
    params = list(text.parameters()) + list(video.parameters()) + list(text_proj.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    gen = torch.Generator().manual_seed(seed)
    losses = []
    for it in range(iters):
        idx = torch.randperm(len(clips), generator=gen)[:batch_size]
        t_emb = F.normalize(text_proj(text([trips[i] for i in idx.tolist()]).mean(dim=1)), dim=-1)
        v_emb = F.normalize(video(frames[idx]), dim=-1)
        logits = t_emb @ v_emb.T / temperature
        # clips sharing a caption are all positives for each other
        ids = triplet_ids([trips[i] for i in idx.tolist()])
        same = (ids[:, None, :] == ids[None, :, :]).all(-1).float()
        targets = same / same.sum(dim=1, keepdim=True)
        loss = 0.5 * (
            -(targets * F.log_softmax(logits, dim=1)).sum(1).mean()
            - (targets * F.log_softmax(logits.T, dim=1)).sum(1).mean()
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if it % 100 == 0:
            logger.info("text pretrain iter %d loss %.4f", it, losses[-1])
    text.set_finetune(False)
    text.eval()
    return text, losses
