"""Stochastic view generation: flips, rotation, resized crop and colour jitter."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class AugmentConfig:
    flip: bool = True
    rot90: bool = True
    max_angle: float = 10.0  # degrees of jitter on top of the right-angle rotation
    min_crop_scale: float = 0.8
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(flip=False, rot90=False, max_angle=0.0, min_crop_scale=1.0,
                   brightness=0.0, contrast=0.0, saturation=0.0)


@dataclass(frozen=True)
class AugmentParams:
    hflip: bool = False
    vflip: bool = False
    quarter_turns: int = 0
    angle: float = 0.0
    crop_scale: float = 1.0
    crop_shift: tuple = (0.0, 0.0)  # fraction of the free margin, in [-1, 1]
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0


def sample_params(rng: np.random.Generator, config: AugmentConfig) -> AugmentParams:
    # draw every variate unconditionally so the stream does not depend on the config
    u = rng.random(11)
    return AugmentParams(
        hflip=bool(config.flip and u[0] < 0.5),
        vflip=bool(config.flip and u[1] < 0.5),
        quarter_turns=int(u[2] * 4) if config.rot90 else 0,
        angle=float((2 * u[3] - 1) * config.max_angle),
        crop_scale=float(config.min_crop_scale + u[4] * (1.0 - config.min_crop_scale)),
        crop_shift=(float(2 * u[5] - 1), float(2 * u[6] - 1)),
        brightness=float(1 + (2 * u[7] - 1) * config.brightness),
        contrast=float(1 + (2 * u[8] - 1) * config.contrast),
        saturation=float(1 + (2 * u[9] - 1) * config.saturation),
    )


def _affine(img: np.ndarray, angle: float, scale: float, shift: tuple, order: int = 1) -> np.ndarray:
    h, w = img.shape[:2]
    theta = np.deg2rad(angle)
    c, s = np.cos(theta), np.sin(theta)
    # output (row, col) -> input coordinates
    matrix = scale * np.array([[c, -s], [s, c]])
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    margin = (1.0 - scale) * np.array([h, w]) / 2.0
    offset = center + np.asarray(shift) * margin - matrix @ center
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        out[..., ch] = ndimage.affine_transform(
            img[..., ch], matrix, offset=offset, order=order, mode="reflect"
        )
    return out


def _geometric(img: np.ndarray, p: AugmentParams, order: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h < 2 or w < 2:
        return img
    if p.hflip:
        img = img[:, ::-1]
    if p.vflip:
        img = img[::-1]
    if p.quarter_turns % 4:
        img = np.rot90(img, p.quarter_turns % 4)
    if p.angle != 0.0 or p.crop_scale != 1.0:
        img = _affine(np.ascontiguousarray(img), p.angle, p.crop_scale, p.crop_shift, order)
    return np.ascontiguousarray(img)


def apply_params(image: np.ndarray, p: AugmentParams) -> np.ndarray:
    """Apply fixed augmentation parameters to an H x W x 3 image in [0, 1]."""
    img = _geometric(np.asarray(image, dtype=np.float32), p, order=1)

    if p.brightness != 1.0:
        img = img * np.float32(p.brightness)
    if p.contrast != 1.0:
        mean = float((img @ _LUMA).mean())
        img = (img - mean) * np.float32(p.contrast) + np.float32(mean)
    if p.saturation != 1.0:
        gray = (img @ _LUMA)[..., None]
        img = (img - gray) * np.float32(p.saturation) + gray
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def augment(sample, seed: int, config: AugmentConfig | None = None):
    """Return an augmented copy of ``sample``; deterministic given ``seed``."""
    config = config or AugmentConfig()
    params = sample_params(np.random.default_rng(seed), config)
    changes = {"image": apply_params(sample.image, params)}
    if sample.mask is not None:
        changes["mask"] = _geometric(sample.mask[..., None], params, order=0)[..., 0]
    return dataclasses.replace(sample, **changes)
