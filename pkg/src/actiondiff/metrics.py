"""Video quality metrics: PSNR, SSIM, a feature-distance LPIPS proxy and a
Frechet video distance over a fixed random spatio-temporal feature network.

The two learned-feature metrics use seed-pinned random networks, so their
values are internally comparable but not on the scale of published
LPIPS/FVD numbers.
"""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from torch import nn

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
LUMA = np.array([0.299, 0.587, 0.114])
REPORT_COLUMNS = ("model", "fvd", "psnr", "lpips", "ssim", "n_clips")


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


@dataclass
class MetricsReport:
    fvd: float
    psnr_db: float
    lpips: float
    ssim: float
    n_clips: int

    def row(self, model: str) -> dict:
        return {"model": model, "fvd": self.fvd, "psnr": self.psnr_db, "lpips": self.lpips,
                "ssim": self.ssim, "n_clips": self.n_clips}

    def is_finite(self) -> bool:
        return all(np.isfinite([self.fvd, self.psnr_db, self.lpips, self.ssim]))


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, max_val: float = 1.0, cap: float = PSNR_CAP) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(max_val**2 / mse))


def to_luma(frame: np.ndarray) -> np.ndarray:
    """``3 x H x W`` RGB -> ``H x W`` luma; 2-D input passes through."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return frame
    if frame.ndim == 3 and frame.shape[0] == 3:
        return np.tensordot(LUMA, frame, axes=1)
    raise ValueError(f"expected H x W or 3 x H x W, got {frame.shape}")


def ssim(a, b, window: int = 8, K1: float = 0.01, K2: float = 0.03, L: float = 1.0) -> float:
    """Mean SSIM over all ``window x window`` patches (stride 1) of two frames.

    Windows use uniform weights and population moments.  A luminance or
    contrast-structure ratio whose numerator and denominator are both zero is
    taken as 1.
    """
    a, b = _pair(to_luma(a), to_luma(b))
    if min(a.shape) < window:
        raise ValueError(f"frame {a.shape} smaller than the {window}x{window} window")
    C1, C2 = (K1 * L) ** 2, (K2 * L) ** 2
    pa = sliding_window_view(a, (window, window))
    pb = sliding_window_view(b, (window, window))
    mu_a, mu_b = pa.mean(axis=(-1, -2)), pb.mean(axis=(-1, -2))
    var_a = pa.var(axis=(-1, -2))
    var_b = pb.var(axis=(-1, -2))
    cov = ((pa - mu_a[..., None, None]) * (pb - mu_b[..., None, None])).mean(axis=(-1, -2))

    def ratio(num, den):
        out = np.ones_like(num)
        nz = den != 0
        out[nz] = num[nz] / den[nz]
        return out

    lum = ratio(2 * mu_a * mu_b + C1, mu_a**2 + mu_b**2 + C1)
    cs = ratio(2 * cov + C2, var_a + var_b + C2)
    return float(np.mean(lum * cs))


def video_ssim(a, b, **kwargs) -> float:
    a, b = _pair(a, b)
    return float(np.mean([ssim(fa, fb, **kwargs) for fa, fb in zip(a, b)]))


# --------------------------------------------------------------------------- #
# feature networks
# --------------------------------------------------------------------------- #

class FrameFeatureNet(nn.Module):
    """Fixed random conv tower returning a list of per-layer feature maps."""

    def __init__(self, seed: int = 1234, widths=(16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.layers = nn.ModuleList()
        ch = 3
        for w in widths:
            conv = nn.Conv2d(ch, w, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * np.sqrt(2.0 / (ch * 9)))
                conv.bias.zero_()
            self.layers.append(conv)
            ch = w
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, frames: torch.Tensor):
        feats, x = [], frames * 2.0 - 1.0
        for conv in self.layers:
            x = torch.relu(conv(x))
            feats.append(x)
        return feats


class VideoFeatureNet(nn.Module):
    """Fixed random 3-D conv tower mapping a ``K x 3 x H x W`` clip to a vector."""

    def __init__(self, dim: int = 64, seed: int = 4321, widths=(16, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        ch = 3
        for w in widths:
            conv = nn.Conv3d(ch, w, 3, stride=(1, 2, 2), padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * np.sqrt(2.0 / (ch * 27)))
                conv.bias.zero_()
            self.convs.append(conv)
            ch = w
        self.proj = nn.Linear(2 * ch, dim)
        with torch.no_grad():
            self.proj.weight.copy_(torch.randn(self.proj.weight.shape, generator=gen) / np.sqrt(2 * ch))
            self.proj.bias.zero_()
        self.dim = dim
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        x = clips.permute(0, 2, 1, 3, 4) * 2.0 - 1.0  # (B, 3, K, H, W)
        for conv in self.convs:
            x = torch.relu(conv(x))
        pooled = torch.cat([x.mean(dim=(2, 3, 4)), x.amax(dim=(2, 3, 4))], dim=1)
        return self.proj(pooled)


def _video_tensor(v) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(v, dtype=np.float32))
    if t.dim() == 3:
        t = t.unsqueeze(0)
    return t


def lpips_proxy(a, b, feat_net: FrameFeatureNet = None) -> float:
    """Mean over frames and layers of the squared distance between channel-normalized features."""
    a, b = _pair(a, b)
    feat_net = feat_net or FrameFeatureNet()
    fa, fb = feat_net(_video_tensor(a)), feat_net(_video_tensor(b))
    total = 0.0
    for xa, xb in zip(fa, fb):
        na = xa / (xa.norm(dim=1, keepdim=True) + 1e-10)
        nb = xb / (xb.norm(dim=1, keepdim=True) + 1e-10)
        total += float(((na - nb) ** 2).sum(dim=1).mean())
    return total / len(fa)


# --------------------------------------------------------------------------- #
# Frechet distance
# --------------------------------------------------------------------------- #

def gaussian_stats(features) -> GaussianStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be an n x d array")
    if x.shape[0] < 2:
        raise ValueError("need at least two feature rows")
    mu = x.mean(axis=0)
    sigma = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    return GaussianStats(mu, 0.5 * (sigma + sigma.T), x.shape[0])


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(s1: GaussianStats, s2: GaussianStats) -> float:
    """``|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))``.

    The cross term uses ``tr((S1 S2)^(1/2)) = tr((R S2 R)^(1/2))`` with
    ``R = S1^(1/2)``, so only symmetric eigendecompositions are needed.
    """
    mu1, mu2 = np.atleast_1d(s1.mu), np.atleast_1d(s2.mu)
    S1, S2 = np.atleast_2d(s1.sigma), np.atleast_2d(s2.sigma)
    if mu1.shape != mu2.shape or S1.shape != S2.shape:
        raise ValueError("statistics have different feature dimensions")
    for arr in (mu1, mu2, S1, S2):
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite statistics")
    root = _psd_sqrt(S1)
    cross = np.linalg.eigvalsh(0.5 * ((root @ S2 @ root) + (root @ S2 @ root).T))
    tr_cross = float(np.sum(np.sqrt(np.clip(cross, 0.0, None))))
    d = float(np.sum((mu1 - mu2) ** 2) + np.trace(S1) + np.trace(S2) - 2.0 * tr_cross)
    return max(d, 0.0)


def fvd(real_clips, gen_clips, video_feat_net: VideoFeatureNet = None) -> float:
    real = _video_tensor(real_clips)
    gen = _video_tensor(gen_clips)
    if len(real) == 0 or len(gen) == 0:
        raise ValueError("FVD needs non-empty clip sets")
    net = video_feat_net or VideoFeatureNet()
    for name, n in (("real", len(real)), ("generated", len(gen))):
        if n < net.dim // 4:
            warnings.warn(f"only {n} {name} clips for {net.dim}-d features; FVD will be noisy", stacklevel=2)
    return frechet_distance(gaussian_stats(net(real).numpy()), gaussian_stats(net(gen).numpy()))


# --------------------------------------------------------------------------- #
# aggregation and reports
# --------------------------------------------------------------------------- #

def evaluate_pairs(real: Sequence[np.ndarray], generated: Sequence[np.ndarray],
                   frame_net: FrameFeatureNet = None, video_net: VideoFeatureNet = None) -> MetricsReport:
    """Per-clip PSNR/SSIM/LPIPS averaged over clips, plus FVD between the two sets."""
    if len(real) == 0:
        raise ValueError("empty evaluation set")
    if len(real) != len(generated):
        raise ValueError("real and generated sets differ in size")
    frame_net = frame_net or FrameFeatureNet()
    video_net = video_net or VideoFeatureNet()
    p = [psnr(r, g) for r, g in zip(real, generated)]
    s = [video_ssim(r, g) for r, g in zip(real, generated)]
    lp = [lpips_proxy(r, g, frame_net) for r, g in zip(real, generated)]
    if len(real) >= 2:
        fv = fvd(np.stack(real), np.stack(generated), video_net)
    else:
        fv = float("nan")
    return MetricsReport(fvd=fv, psnr_db=float(np.mean(p)), lpips=float(np.mean(lp)),
                         ssim=float(np.mean(s)), n_clips=len(real))


def write_report(rows: Sequence[dict], path, columns=REPORT_COLUMNS) -> None:
    """Write rows to ``<path>.csv`` and ``<path>.json`` (suffix of ``path`` is replaced)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = path.with_suffix(".csv"), path.with_suffix(".json")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in columns})
    json_path.write_text(json.dumps([{k: row.get(k) for k in columns} for row in rows], indent=2))


def report_dict(report: MetricsReport) -> dict:
    return asdict(report)
