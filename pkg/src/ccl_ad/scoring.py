"""Anomaly maps from encoder/decoder feature disagreement."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .losses import l2_normalize


@dataclass
class AnomalyMap:
    map: np.ndarray  # H x W, float64, >= 0
    image_score: float
    source_path: str = ""


def stage_distance_map(f_enc: torch.Tensor, f_dec: torch.Tensor) -> torch.Tensor:
    """Per-position ``1 - cos`` over the channel axis.

    Accepts c x h x w or N x c x h x w tensors; returns h x w or N x h x w.
    """
    if f_enc.shape != f_dec.shape:
        raise ValueError(f"shape mismatch {tuple(f_enc.shape)} vs {tuple(f_dec.shape)}")
    dim = -3
    cos = (l2_normalize(f_enc, dim=dim) * l2_normalize(f_dec, dim=dim)).sum(dim=dim)
    return (1.0 - cos).clamp(0.0, 2.0)


def fuse_maps(stage_maps: Sequence[torch.Tensor], size) -> torch.Tensor:
    """Bilinearly upsample each (N x) h x w map to ``size`` and average."""
    if not stage_maps:
        raise ValueError("need at least one stage map")
    size = (size, size) if isinstance(size, int) else tuple(size)
    ups = []
    for m in stage_maps:
        squeeze = m.ndim == 2
        x = m[None, None] if squeeze else m[:, None]
        x = F.interpolate(x.double(), size=size, mode="bilinear", align_corners=False)
        ups.append(x[0, 0] if squeeze else x[:, 0])
    return torch.stack(ups).mean(dim=0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(4 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(amap, sigma: float = 4.0) -> np.ndarray:
    """Separable Gaussian blur, radius ``ceil(4 sigma)``, reflect padding."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    kernel = gaussian_kernel(sigma)
    out = np.asarray(amap, dtype=np.float64)
    for axis in (-2, -1):
        out = ndimage.convolve1d(out, kernel, axis=axis, mode="reflect")
    return out


def anomaly_maps(out, resolution, sigma: float = 4.0) -> np.ndarray:
    """Smoothed, fused anomaly maps for a batched forward output: N x H x W."""
    stage_maps = [stage_distance_map(fe, fd) for fe, fd in zip(out.encoder_pyramid, out.decoder_pyramid)]
    fused = fuse_maps(stage_maps, resolution).detach().cpu().numpy()
    smoothed = gaussian_smooth(fused, sigma)
    return np.clip(smoothed, 0.0, None)


def score_sample(out, resolution, sigma: float = 4.0, source_paths: Optional[Sequence[str]] = None) -> list:
    """One :class:`AnomalyMap` per item of a batched forward output."""
    maps = anomaly_maps(out, resolution, sigma)
    paths = list(source_paths) if source_paths is not None else [""] * len(maps)
    return [AnomalyMap(m, float(m.max()), p) for m, p in zip(maps, paths)]


@torch.no_grad()
def score_samples(model, samples, batch_size: int = 32, sigma: float = 4.0):
    """Score ``samples`` with ``model`` in eval mode; returns (maps, global vectors)."""
    from .data import images_to_tensor

    was_training = model.training
    model.eval()
    maps, globals_ = [], []
    try:
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            x = images_to_tensor(chunk)
            out = model(x)
            maps.extend(score_sample(out, x.shape[-2:], sigma, [s.source_path for s in chunk]))
            globals_.append(out.global_features.detach().cpu().numpy())
    finally:
        model.train(was_training)
    g = np.concatenate(globals_) if globals_ else np.zeros((0, 0))
    return maps, g
