"""Training loop, evaluation and the conditioning/fusion ablation harness."""
from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .codec import VideoCodec, CodecConfig, encode_video
from .conditioning import CONDITIONING_KINDS, FUSION_KINDS, TextTripletEncoder, pretrain_text_encoder
from .data import Clip, check_disjoint
from .denoiser import DenoiserConfig
from .diffusion import NonFiniteLossError, make_linear_schedule, sample_videos, training_loss
from .metrics import FrameFeatureNet, MetricsReport, VideoFeatureNet, evaluate_pairs
from .model import ModelConfig, VideoDiffusionModel

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    iterations: int = 10000
    learning_rate: float = 1e-5
    batch_size: int = 8
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    conditioning_kind: str = "learnable"
    fusion_kind: str = "linear"
    # schedule
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    loss_weighting: str = "snr"
    # not from the method description; protects the small from-scratch models
    grad_clip: Optional[float] = 1.0
    checkpoint_every: int = 0
    # architecture
    token_dim: int = 64
    cond_dim: int = 64
    base_channels: int = 32
    depth: int = 3
    temporal_enabled: bool = True
    num_frames: int = 7
    frame_residual: bool = True
    # text-encoder pretraining used when none is supplied
    text_pretrain_iters: int = 300

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.conditioning_kind not in CONDITIONING_KINDS:
            raise ValueError(f"conditioning_kind must be one of {CONDITIONING_KINDS}")
        if self.fusion_kind not in FUSION_KINDS:
            raise ValueError(f"fusion_kind must be one of {FUSION_KINDS}")
        self.adam_betas = tuple(self.adam_betas)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def schedule(self):
        return make_linear_schedule(self.T, self.beta_start, self.beta_end).with_weights(self.loss_weighting)

    def model_config(self, image_size) -> ModelConfig:
        return ModelConfig(
            conditioning=self.conditioning_kind,
            fusion=self.fusion_kind,
            token_dim=self.token_dim,
            frame_residual=self.frame_residual,
            image_size=tuple(image_size),
            denoiser=DenoiserConfig(
                base_channels=self.base_channels,
                depth=self.depth,
                cond_dim=self.cond_dim,
                temporal_enabled=self.temporal_enabled,
                num_frames=self.num_frames,
            ),
        )


@dataclass
class TrainResult:
    model: VideoDiffusionModel
    losses: List[float]
    config: TrainConfig
    checkpoint: Optional[Path] = None


class TrainingDivergedError(NonFiniteLossError):
    def __init__(self, iteration: int, detail: str = ""):
        super().__init__(f"loss became non-finite at iteration {iteration} {detail}".strip())
        self.iteration = iteration


# --------------------------------------------------------------------------- #
# model persistence
# --------------------------------------------------------------------------- #

def save_model(model: VideoDiffusionModel, path, train_config: Optional[TrainConfig] = None, extra: dict = None) -> Path:
    header = {
        "kind": "video_diffusion",
        "model": model.config.to_dict(),
        "codec": asdict(model.codec.config),
        "train": train_config.to_dict() if train_config else None,
        **(extra or {}),
    }
    if isinstance(model.triplet_encoder, TextTripletEncoder):
        enc = model.triplet_encoder
        header["text_encoder"] = {"dim": enc.words.embedding_dim, "heads": enc.attn.num_heads, "lexicon": enc.lexicon}
    return save_checkpoint(path, model.state_dict(), header)


def load_model(path) -> Tuple[VideoDiffusionModel, dict]:
    tensors, header = load_checkpoint(path)
    if header.get("kind") != "video_diffusion":
        raise ValueError(f"{path} is not a video-diffusion checkpoint")
    codec = VideoCodec(CodecConfig(**header["codec"]))
    text = None
    if "text_encoder" in header:
        te = header["text_encoder"]
        text = TextTripletEncoder(te["dim"], te["lexicon"], heads=te["heads"])
    model = VideoDiffusionModel(ModelConfig(**header["model"]), codec, text)
    model.load_state_dict(tensors)
    model.eval()
    return model, header


# --------------------------------------------------------------------------- #
# training
# --------------------------------------------------------------------------- #

def _clip_arrays(clips: Sequence[Clip], num_frames: int):
    frames = np.stack([c.frames[:num_frames] for c in clips]).astype(np.float32)
    return torch.as_tensor(frames), [c.common_triplet for c in clips]


def build_model(config: TrainConfig, codec: VideoCodec, image_size, text_encoder=None) -> VideoDiffusionModel:
    torch.manual_seed(config.seed)
    text = copy.deepcopy(text_encoder) if text_encoder is not None else None
    return VideoDiffusionModel(config.model_config(image_size), codec, text)


def train(
    config: TrainConfig,
    clips: Sequence[Clip],
    codec: VideoCodec,
    text_encoder: Optional[TextTripletEncoder] = None,
    out_dir=None,
    log_every: int = 50,
) -> TrainResult:
    """Fit a conditional video diffusion model on ``clips``.

    Fully deterministic given ``config.seed``.  When ``out_dir`` is given the
    per-iteration loss trace, the config and the final (and periodic)
    checkpoints are written there.
    """
    if not clips:
        raise ValueError("training needs at least one clip")
    frames, trips = _clip_arrays(clips, config.num_frames)
    image_size = frames.shape[-2:]
    if config.conditioning_kind in ("text", "text_finetuned") and text_encoder is None:
        logger.info("no text encoder supplied; pretraining one for %d iterations", config.text_pretrain_iters)
        text_encoder, _ = pretrain_text_encoder(clips, dim=config.token_dim, iters=config.text_pretrain_iters, seed=config.seed)
    model = build_model(config, codec, image_size, text_encoder)
    sched = config.schedule()
    latents = encode_video(frames, codec)
    first = frames[:, 0].contiguous()

    params = model.trainable_parameters()
    opt = torch.optim.Adam(params, lr=config.learning_rate, betas=config.adam_betas)
    gen = torch.Generator().manual_seed(config.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))

    losses: List[float] = []
    order = torch.empty(0, dtype=torch.long)
    model.train()
    for it in range(config.iterations):
        if len(order) < config.batch_size:
            order = torch.cat([order, torch.randperm(len(clips), generator=gen)])
        idx, order = order[: config.batch_size], order[config.batch_size :]
        cond = model.condition(first[idx], [trips[i] for i in idx.tolist()])
        try:
            loss = training_loss(latents[idx] - model.latent_offset(cond), cond, model, sched, gen)
        except NonFiniteLossError as exc:
            raise TrainingDivergedError(it, str(exc)) from exc
        opt.zero_grad()
        loss.backward()
        if config.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        opt.step()
        losses.append(loss.item())
        if log_every and it % log_every == 0:
            logger.info("iter %d loss %.5f", it, losses[-1])
        if out is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            save_model(model, out / f"checkpoint_{it + 1:06d}.safetensors", config)
    model.eval()

    ckpt = None
    if out is not None:
        with open(out / "loss_trace.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "loss"])
            w.writerows((i, repr(l)) for i, l in enumerate(losses))
        ckpt = save_model(model, out / "checkpoint.safetensors", config)
    return TrainResult(model, losses, config, ckpt)


# --------------------------------------------------------------------------- #
# evaluation
# --------------------------------------------------------------------------- #

def model_generator(model: VideoDiffusionModel, sched, steps: int = 50, seed: int = 0, batch_size: int = 16) -> Callable:
    """Wrap a model as ``generate(first_frames, triplets) -> videos`` for :func:`evaluate_generator`."""

    def generate(first_frames: np.ndarray, triplets) -> np.ndarray:
        out = []
        for s in range(0, len(first_frames), batch_size):
            chunk = np.moveaxis(first_frames[s : s + batch_size], 1, -1)
            out.append(sample_videos(chunk, triplets[s : s + batch_size], model, sched, steps=steps, seed=seed + s))
        return np.concatenate(out)

    return generate


def evaluate_generator(generate: Callable, test_clips: Sequence[Clip], train_clips: Sequence[Clip] = ()) -> MetricsReport:
    """Generate from each clip's first frame and common triplet, then score against the clip."""
    if not test_clips:
        raise ValueError("empty test set")
    if train_clips:
        check_disjoint(train_clips, test_clips)
    real = np.stack([c.frames for c in test_clips]).astype(np.float32)
    gen = np.asarray(generate(real[:, 0], [c.common_triplet for c in test_clips]), dtype=np.float32)
    if gen.shape != real.shape:
        raise ValueError(f"generator returned {gen.shape}, expected {real.shape}")
    return evaluate_pairs(list(real), list(gen), FrameFeatureNet(), VideoFeatureNet())


def evaluate(checkpoint, test_clips: Sequence[Clip], sched=None, steps: int = 50, seed: int = 0,
             train_clips: Sequence[Clip] = ()) -> MetricsReport:
    """Score a trained model (or checkpoint path) on held-out clips."""
    model = load_model(checkpoint)[0] if isinstance(checkpoint, (str, Path)) else checkpoint
    sched = sched or make_linear_schedule()
    return evaluate_generator(model_generator(model, sched, steps, seed), test_clips, train_clips)


# --------------------------------------------------------------------------- #
# ablation
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class AblationGrid:
    rows: Tuple[Tuple[str, str], ...]

    def __post_init__(self):
        rows = tuple((str(c), str(f)) for c, f in self.rows)
        if len(set(rows)) != len(rows):
            raise ValueError("ablation grid contains duplicate (conditioning, fusion) rows")
        for c, f in rows:
            if c not in CONDITIONING_KINDS or f not in FUSION_KINDS:
                raise ValueError(f"invalid ablation row ({c}, {f})")
        object.__setattr__(self, "rows", rows)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)


# The unconditioned row keeps image conditioning and replaces the triplet with a
# learned null token; it runs through the linear fusion.
TABLE2_GRID = AblationGrid(
    (
        ("none", "linear"),
        ("learnable", "linear"),
        ("learnable", "attn_image_query"),
        ("text", "linear"),
        ("text_finetuned", "linear"),
        ("text_finetuned", "attn_image_query"),
        ("text_finetuned", "attn_triplet_query"),
    )
)

ABLATION_COLUMNS = ("conditioning", "fusion", "fvd", "psnr", "lpips", "ssim", "n_clips", "status")
_COND_LABEL = {"none": "-", "learnable": "Triplets", "text": "Text", "text_finetuned": "Text + FT"}
_FUSION_LABEL = {"linear": "Linear", "attn_image_query": "Att. + I", "attn_triplet_query": "Att. + T"}


def run_ablation(
    grid: AblationGrid,
    base_config: TrainConfig,
    train_clips: Sequence[Clip],
    test_clips: Sequence[Clip],
    codec: VideoCodec,
    text_encoder: Optional[TextTripletEncoder] = None,
    steps: int = 50,
    out_path=None,
) -> List[dict]:
    """Train and evaluate one model per grid row with identical seed/data/iterations.

    A failing row is recorded with ``status="failed: ..."`` and the remaining
    rows still run.
    """
    check_disjoint(train_clips, test_clips)
    needs_text = any(c in ("text", "text_finetuned") for c, _ in grid)
    if needs_text and text_encoder is None:
        text_encoder, _ = pretrain_text_encoder(
            train_clips, dim=base_config.token_dim, iters=base_config.text_pretrain_iters, seed=base_config.seed
        )
    sched = base_config.schedule()
    rows = []
    for cond_kind, fusion_kind in grid:
        label = {"conditioning": _COND_LABEL[cond_kind], "fusion": "-" if cond_kind == "none" else _FUSION_LABEL[fusion_kind]}
        cfg = TrainConfig.from_dict({**base_config.to_dict(), "conditioning_kind": cond_kind, "fusion_kind": fusion_kind})
        try:
            result = train(cfg, train_clips, codec, text_encoder, log_every=0)
            report = evaluate(result.model, test_clips, sched, steps=steps, seed=cfg.seed)
            row = {**label, **report.row(f"{cond_kind}/{fusion_kind}"), "status": "ok"}
        except Exception as exc:  # keep going; the table marks the row
            logger.exception("ablation row %s/%s failed", cond_kind, fusion_kind)
            row = {**label, "fvd": float("nan"), "psnr": float("nan"), "lpips": float("nan"),
                   "ssim": float("nan"), "n_clips": len(test_clips), "status": f"failed: {exc}"}
        row["conditioning_kind"], row["fusion_kind"] = cond_kind, fusion_kind
        rows.append(row)
        logger.info("ablation %s / %s: %s", row["conditioning"], row["fusion"], row)
    if out_path is not None:
        from .metrics import write_report

        write_report(rows, out_path, ABLATION_COLUMNS)
    return rows
