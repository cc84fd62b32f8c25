"""Checkpoint files: a flat tensor blob behind a JSON header (safetensors layout).

The model/codec configuration and seed travel in the header's metadata under
the ``"header"`` key as a JSON string.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Tuple

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from .codec import CodecConfig, VideoCodec
from .conditioning import TextTripletEncoder


def save_checkpoint(path, tensors: Dict[str, torch.Tensor], header: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = {k: v.detach().clone().contiguous() for k, v in tensors.items()}
    save_file(flat, str(path), metadata={"header": json.dumps(header, sort_keys=True)})
    return path


def load_checkpoint(path) -> Tuple[Dict[str, torch.Tensor], dict]:
    tensors = {}
    with safe_open(str(path), framework="pt") as fh:
        header = json.loads((fh.metadata() or {}).get("header", "{}"))
        for key in fh.keys():
            tensors[key] = fh.get_tensor(key)
    return tensors, header


def save_codec(codec: VideoCodec, path, seed: int = 0, extra: dict = None) -> Path:
    header = {"kind": "codec", "config": vars(codec.config).copy(), "seed": seed, **(extra or {})}
    return save_checkpoint(path, codec.state_dict(), header)


def load_codec(path) -> VideoCodec:
    tensors, header = load_checkpoint(path)
    if header.get("kind") != "codec":
        raise ValueError(f"{path} is not a codec checkpoint")
    codec = VideoCodec(CodecConfig(**header["config"]))
    codec.load_state_dict(tensors)
    codec.eval()
    return codec


def save_text_encoder(enc: TextTripletEncoder, path, seed: int = 0, extra: dict = None) -> Path:
    header = {
        "kind": "text_encoder",
        "dim": enc.words.embedding_dim,
        "heads": enc.attn.num_heads,
        "lexicon": enc.lexicon,
        "seed": seed,
        **(extra or {}),
    }
    return save_checkpoint(path, enc.state_dict(), header)


def load_text_encoder(path) -> TextTripletEncoder:
    tensors, header = load_checkpoint(path)
    if header.get("kind") != "text_encoder":
        raise ValueError(f"{path} is not a text-encoder checkpoint")
    enc = TextTripletEncoder(header["dim"], header["lexicon"], heads=header["heads"])
    enc.load_state_dict(tensors)
    enc.eval()
    return enc
