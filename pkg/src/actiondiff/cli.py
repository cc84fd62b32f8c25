"""Command-line entry point: ``actiondiff <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Progress goes to
stderr; data only goes to the files named by flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger("actiondiff")

CONDITIONING_FLAGS = {"none": "none", "learnable": "learnable", "text": "text", "text-ft": "text_finetuned"}
FUSION_FLAGS = {"linear": "linear", "att-i": "attn_image_query", "att-t": "attn_triplet_query"}
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, seed=True, inp=False, out=True):
    if seed:
        p.add_argument("--seed", type=int, default=0, help="seed for every random draw (default 0)")
    if inp:
        p.add_argument("--in", dest="inp", required=True, help="input directory")
    if out:
        p.add_argument("--out", required=True, help="output path")


def _model_flags(p: argparse.ArgumentParser):
    p.add_argument("--iterations", type=int, default=10000, help="optimizer steps (default 10000)")
    p.add_argument("--lr", type=float, default=1e-5, help="Adam learning rate (default 1e-5)")
    p.add_argument("--batch-size", type=int, default=8, help="clips per step (default 8)")
    p.add_argument("--loss-weighting", choices=("snr", "unit", "min_snr"), default="snr",
                   help="per-timestep loss weight (default snr, the plain noise MSE)")
    p.add_argument("--frames", type=int, default=7, help="frames per generated clip (default 7)")
    p.add_argument("--steps", type=int, default=50, help="sampling steps (default 50)")
    p.add_argument("--test-fraction", type=float, default=0.2, help="held-out share of source videos (default 0.2)")
    p.add_argument("--codec", help="codec checkpoint; pretrained on the training clips when omitted")
    p.add_argument("--codec-iterations", type=int, default=1500, help="codec steps when pretraining (default 1500)")
    p.add_argument("--text-encoder", help="pretrained text-encoder checkpoint for text conditioning")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="actiondiff", description="Triplet-conditioned latent video diffusion toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug-level progress output")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render synthetic annotated videos")
    _common(p)
    p.add_argument("--videos", type=int, default=8, help="number of videos (default 8)")
    p.add_argument("--segments", type=int, default=5, help="scenes per video (default 5)")
    p.add_argument("--segment-len", type=int, default=14, help="frames per scene (default 14)")
    p.add_argument("--size", type=int, default=32, help="frame height and width (default 32)")
    p.add_argument("--speed", type=float, default=1.0, help="instrument speed in pixels per frame (default 1)")
    p.add_argument("--no-black", action="store_true", help="omit black frame runs")
    p.add_argument("--no-static", action="store_true", help="omit the no-action scene")

    p = sub.add_parser("preprocess", help="cut raw videos into annotated clips")
    _common(p, seed=False, inp=True)
    p.add_argument("--cut-threshold", type=float, default=0.27, help="scene-cut score threshold (default 0.27)")
    p.add_argument("--frames", type=int, default=7, help="frames per clip (default 7)")

    p = sub.add_parser("pretrain-codec", help="fit the frame autoencoder")
    _common(p, inp=True)
    p.add_argument("--iterations", type=int, default=1500, help="optimizer steps (default 1500)")
    p.add_argument("--lr", type=float, default=2e-3, help="learning rate (default 2e-3)")

    p = sub.add_parser("pretrain-text", help="contrastively pretrain the caption encoder")
    _common(p)
    p.add_argument("--data", required=True, help="clip store")
    p.add_argument("--iterations", type=int, default=300, help="optimizer steps (default 300)")
    p.add_argument("--lr", type=float, default=2e-3, help="learning rate (default 2e-3)")
    p.add_argument("--dim", type=int, default=64, help="token width (default 64)")

    p = sub.add_parser("train", help="train a conditional video model")
    _common(p)
    p.add_argument("--data", required=True, help="clip store")
    p.add_argument("--conditioning", choices=tuple(CONDITIONING_FLAGS), default="learnable")
    p.add_argument("--fusion", choices=tuple(FUSION_FLAGS), default="linear")
    p.add_argument("--checkpoint-every", type=int, default=0, help="periodic checkpoint interval (0 = end only)")
    _model_flags(p)

    p = sub.add_parser("sample", help="generate a clip from one frame and a triplet")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    p.add_argument("--frame", required=True, help="conditioning frame (PNG)")
    p.add_argument("--triplet", required=True, help="instrument,verb,target ids, e.g. 2,3,0")
    p.add_argument("--steps", type=int, default=50, help="sampling steps (default 50)")
    p.add_argument("--frames", type=int, default=7, help="frames to generate (default 7)")

    p = sub.add_parser("eval", help="score a model on held-out clips")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    p.add_argument("--data", required=True, help="clip store")
    p.add_argument("--steps", type=int, default=50, help="sampling steps (default 50)")
    p.add_argument("--frames", type=int, default=7, help="frames per clip (default 7)")
    p.add_argument("--test-fraction", type=float, default=0.2, help="held-out share of source videos (default 0.2)")

    p = sub.add_parser("ablate", help="run the conditioning x fusion ablation grid")
    _common(p)
    p.add_argument("--grid", choices=("table2",), default="table2")
    p.add_argument("--data", required=True, help="clip store")
    _model_flags(p)
    return parser


# --------------------------------------------------------------------------- #
# commands
# --------------------------------------------------------------------------- #

def _load_clips(path):
    from .data import read_clip_store

    clips = read_clip_store(path)
    if not clips:
        raise RuntimeError(f"no clips in {path}")
    return clips


def _codec_for(args, clips):
    from .checkpoint import load_codec
    from .codec import CodecConfig, pretrain_codec

    if args.codec:
        return load_codec(args.codec)
    logger.info("pretraining codec on %d clips for %d iterations", len(clips), args.codec_iterations)
    frames = np.concatenate([c.frames for c in clips])
    return pretrain_codec(frames, CodecConfig(), iters=args.codec_iterations, seed=args.seed)[0]


def _text_for(args):
    if not getattr(args, "text_encoder", None):
        return None
    from .checkpoint import load_text_encoder

    return load_text_encoder(args.text_encoder)


def _train_config(args, conditioning="learnable", fusion="linear"):
    from .training import TrainConfig

    return TrainConfig(
        iterations=args.iterations, learning_rate=args.lr, batch_size=args.batch_size, seed=args.seed,
        conditioning_kind=conditioning, fusion_kind=fusion, loss_weighting=args.loss_weighting,
        num_frames=args.frames, checkpoint_every=getattr(args, "checkpoint_every", 0),
    )


def cmd_synth(args):
    from .data import SynthSpec, spec_to_dict, synth_video, write_raw_videos

    spec = SynthSpec(num_segments=args.segments, segment_len=args.segment_len, H=args.size, W=args.size,
                     include_black=not args.no_black, include_static=not args.no_static, speed=args.speed)
    videos = []
    for i in range(args.videos):
        videos.append(synth_video(spec, seed=args.seed * 100003 + i, name=f"video_{i:03d}"))
        logger.info("rendered video %d/%d (%d frames)", i + 1, args.videos, len(videos[-1]))
    write_raw_videos(videos, args.out, generator={"spec": spec_to_dict(spec), "seed": args.seed})


def cmd_preprocess(args):
    from .data import clip_violations, preprocess_video, read_raw_videos, write_clip_store

    clips = []
    for video in read_raw_videos(args.inp):
        found = preprocess_video(video, args.cut_threshold, clip_len=args.frames)
        logger.info("%s: %d clips", video.name, len(found))
        clips.extend(found)
    bad = [c.name for c in clips if clip_violations(c)]
    if bad:
        raise RuntimeError(f"clips violate invariants: {bad[:5]}")
    write_clip_store(clips, args.out, extra={"cut_threshold": args.cut_threshold, "source": str(args.inp)})
    logger.info("wrote %d clips to %s", len(clips), args.out)


def _frames_from(path):
    from .data import read_clip_store, read_raw_videos

    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if "clips" in manifest:
        return np.concatenate([c.frames for c in read_clip_store(path)])
    return np.concatenate([v.frames for v in read_raw_videos(path)])


def cmd_pretrain_codec(args):
    from .checkpoint import save_codec
    from .codec import CodecConfig, pretrain_codec

    frames = _frames_from(args.inp)
    logger.info("codec pretraining on %d frames", len(frames))
    codec, losses = pretrain_codec(frames, CodecConfig(), iters=args.iterations, seed=args.seed, lr=args.lr)
    save_codec(codec, args.out, seed=args.seed, extra={"final_loss": losses[-1] if losses else None})


def cmd_pretrain_text(args):
    from .checkpoint import save_text_encoder
    from .conditioning import pretrain_text_encoder

    clips = _load_clips(args.data)
    enc, losses = pretrain_text_encoder(clips, dim=args.dim, iters=args.iterations, seed=args.seed, lr=args.lr)
    save_text_encoder(enc, args.out, seed=args.seed, extra={"final_loss": losses[-1] if losses else None})


def _split(args, clips):
    from .data import split_by_source

    return split_by_source(clips, args.test_fraction, seed=args.seed)


def cmd_train(args):
    from .training import train

    train_clips, test_clips = _split(args, _load_clips(args.data))
    config = _train_config(args, CONDITIONING_FLAGS[args.conditioning], FUSION_FLAGS[args.fusion])
    codec = _codec_for(args, train_clips)
    out = Path(args.out)
    result = train(config, train_clips, codec, _text_for(args), out_dir=out)
    (out / "split.json").write_text(json.dumps(
        {"train": [c.name for c in train_clips], "test": [c.name for c in test_clips]}, indent=2))
    logger.info("final loss %.5f; checkpoint %s", result.losses[-1] if result.losses else float("nan"),
                result.checkpoint)


def cmd_sample(args):
    from PIL import Image

    from ._validation import check_frames, check_triplets
    from .data import write_frames
    from .diffusion import make_linear_schedule, sample_video
    from .training import load_model

    model, header = load_model(args.checkpoint)
    if args.frames != model.num_frames:
        raise ValueError(f"checkpoint generates {model.num_frames} frames, not {args.frames}")
    frame = np.asarray(Image.open(args.frame).convert("RGB"), dtype=np.float32) / 255.0
    frame = check_frames(frame, channels_last=True)[0]
    triplet = check_triplets(args.triplet)[0]
    train_cfg = header.get("train") or {}
    sched = make_linear_schedule(train_cfg.get("T", 1000), train_cfg.get("beta_start", 1e-4),
                                 train_cfg.get("beta_end", 0.02))
    video = sample_video(frame, triplet, model, sched, steps=args.steps, seed=args.seed)
    write_frames(video, args.out)
    logger.info("wrote %d frames to %s", len(video), args.out)


def cmd_eval(args):
    from .diffusion import make_linear_schedule
    from .metrics import write_report
    from .training import evaluate, load_model

    model, header = load_model(args.checkpoint)
    train_clips, test_clips = _split(args, _load_clips(args.data))
    train_cfg = header.get("train") or {}
    sched = make_linear_schedule(train_cfg.get("T", 1000), train_cfg.get("beta_start", 1e-4),
                                 train_cfg.get("beta_end", 0.02))
    report = evaluate(model, test_clips, sched, steps=args.steps, seed=args.seed, train_clips=train_clips)
    write_report([report.row(Path(args.checkpoint).stem)], args.out)
    logger.info("%s", report)


def cmd_ablate(args):
    from .training import TABLE2_GRID, run_ablation

    train_clips, test_clips = _split(args, _load_clips(args.data))
    codec = _codec_for(args, train_clips)
    run_ablation(TABLE2_GRID, _train_config(args), train_clips, test_clips, codec, _text_for(args),
                 steps=args.steps, out_path=args.out)


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "pretrain-codec": cmd_pretrain_codec,
    "pretrain-text": cmd_pretrain_text, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", force=True)
    torch.manual_seed(args.seed if hasattr(args, "seed") else 0)
    try:
        COMMANDS[args.command](args)
    except Exception as exc:  # report and map to the runtime exit code
        logger.error("%s failed: %s", args.command, exc)
        logger.debug("traceback", exc_info=True)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
