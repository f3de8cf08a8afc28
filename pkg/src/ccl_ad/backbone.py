"""Reverse-distillation reconstruction model with a trainable projector.

Data flow::

    image -> encoder (frozen) -> f = [f1, f2, f3]
          -> projector        -> v = [v1, v2, v3]      (local CL acts here)
          -> neck             -> z, g = norm(mean(z))  (global CL acts on g)
          -> decoder          -> f_hat = [f1^, f2^, f3^]

The distillation target is the raw encoder pyramid ``f``; the neck consumes
the projected pyramid ``v``. Tensors are N x C x H x W throughout.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .utils import stable_hash


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 64
    channels: tuple = (32, 64, 128)
    base_stride: int = 8
    projector_blocks: int = 4
    projector_identity_init: bool = False
    bottleneck_channels: int = 128
    encoder_seed: int = 0
    norm_groups: int = 8

    @property
    def strides(self) -> tuple:
        return tuple(self.base_stride * 2**i for i in range(len(self.channels)))

    def stage_shapes(self, resolution: int | None = None) -> list:
        res = resolution or self.resolution
        return [(c, math.ceil(res / s), math.ceil(res / s)) for c, s in zip(self.channels, self.strides)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())


class ForwardOutput(NamedTuple):
    encoder_pyramid: List[torch.Tensor]
    projected: List[torch.Tensor]
    bottleneck: torch.Tensor  # z: N x c_b x h_b x w_b
    global_features: torch.Tensor  # g: N x c_b, unit norm
    decoder_pyramid: List[torch.Tensor]


def _gn(channels: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(groups, channels), channels)


class Encoder(nn.Module):
    """Small fixed conv pyramid; weights drawn from ``seed`` and frozen.

    Stage 1 is a non-overlapping patch embedding (kernel = stride = base
    stride); a random projection of raw patches keeps local colour and texture
    distinguishable, which stacks of random 3x3 convs do not. Later stages are
    stride-2 convs. Each stage exposes its pre-activation output; the next
    stage consumes the ReLU of it.

    Any module returning a list of per-stage maps with matching channels and
    strides can be swapped in via :class:`ReconstructionModel`.
    """

    def __init__(self, channels=(32, 64, 128), base_stride: int = 8, seed: int = 0):
        super().__init__()
        if base_stride < 2 or base_stride & (base_stride - 1):
            raise ValueError("base_stride must be a power of two >= 2")
        gen = torch.Generator().manual_seed(seed)
        self.stem = nn.Conv2d(3, channels[0], base_stride, stride=base_stride)
        self.stages = nn.ModuleList(
            nn.Conv2d(c_in, c_out, 3, stride=2, padding=1) for c_in, c_out in zip(channels[:-1], channels[1:])
        )
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                with torch.no_grad():
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                    m.bias.zero_()
        self.identifier = f"random-patch-conv:channels={list(channels)}:stride={base_stride}:seed={seed}"
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list:
        x = (x - 0.5) / 0.25
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(F.relu(feats[-1])))
        return feats


class ProjectorBlock(nn.Module):
    """Pre-activation residual block: ReLU, 3x3 channel-preserving conv, group norm."""

    def __init__(self, channels: int, groups: int, identity_init: bool = False):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm = _gn(channels, groups)
        if identity_init:
            nn.init.zeros_(self.norm.weight)

    def forward(self, x):
        return x + self.norm(self.conv(F.relu(x)))


class Projector(nn.Module):
    def __init__(self, channels, n_blocks: int = 4, groups: int = 8, identity_init: bool = False):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Sequential(*[ProjectorBlock(c, groups, identity_init) for _ in range(n_blocks)])
            for c in channels
        )

    def forward(self, pyramid: list) -> list:
        return [branch(f) for branch, f in zip(self.branches, pyramid)]


def _down(c_in, c_out, groups):
    return nn.Sequential(nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, bias=False),
                         _gn(c_out, groups), nn.ReLU(inplace=True))


class Neck(nn.Module):
    """Fuse all stages at the deepest resolution and compress to ``z``."""

    def __init__(self, channels, out_channels: int, groups: int = 8):
        super().__init__()
        deepest = channels[-1]
        n = len(channels)
        self.align = nn.ModuleList()
        for i, c in enumerate(channels):
            layers, c_in = [], c
            for _ in range(n - 1 - i):
                layers.append(_down(c_in, deepest, groups))
                c_in = deepest
            if not layers:
                layers.append(nn.Identity())
            self.align.append(nn.Sequential(*layers))
        self.fuse = nn.Sequential(
            nn.Conv2d(deepest * n, out_channels, 1, bias=False), _gn(out_channels, groups), nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
        )

    def forward(self, pyramid: list) -> torch.Tensor:
        target = pyramid[-1].shape[-2:]
        parts = []
        for align, f in zip(self.align, pyramid):
            f = align(f)
            if f.shape[-2:] != target:
                f = F.adaptive_avg_pool2d(f, target)
            parts.append(f)
        return self.fuse(torch.cat(parts, dim=1))


class Decoder(nn.Module):
    """Upsampling path producing reconstructions for every encoder stage."""

    def __init__(self, channels, in_channels: int, groups: int = 8):
        super().__init__()
        rev = list(channels)[::-1]
        self.inputs = nn.ModuleList()
        self.heads = nn.ModuleList()
        c_prev = in_channels
        for i, c in enumerate(rev):
            if i == 0:
                self.inputs.append(nn.Sequential(nn.Conv2d(c_prev, c, 3, padding=1, bias=False),
                                                 _gn(c, groups), nn.ReLU(inplace=True)))
            else:
                self.inputs.append(nn.Sequential(nn.ConvTranspose2d(c_prev, c, 2, stride=2, bias=False),
                                                 _gn(c, groups), nn.ReLU(inplace=True)))
            self.heads.append(nn.Sequential(nn.Conv2d(c, c, 3, padding=1, bias=False), _gn(c, groups),
                                            nn.ReLU(inplace=True), nn.Conv2d(c, c, 3, padding=1)))
            c_prev = c

    def forward(self, z: torch.Tensor, shapes=None) -> list:
        outs, x = [], z
        for i, (inp, head) in enumerate(zip(self.inputs, self.heads)):
            x = inp(x)
            if shapes is not None and tuple(x.shape[-2:]) != tuple(shapes[i]):
                x = F.interpolate(x, size=shapes[i], mode="bilinear", align_corners=False)
            out = head(x)
            outs.append(out)
            x = F.relu(out)
        return outs[::-1]


class ReconstructionModel(nn.Module):
    def __init__(self, config: ModelConfig | None = None, encoder: nn.Module | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        self.encoder = encoder or Encoder(cfg.channels, cfg.base_stride, cfg.encoder_seed)
        self.encoder.requires_grad_(False)
        self.projector = Projector(cfg.channels, cfg.projector_blocks, cfg.norm_groups, cfg.projector_identity_init)
        self.neck = Neck(cfg.channels, cfg.bottleneck_channels, cfg.norm_groups)
        self.decoder = Decoder(cfg.channels, cfg.bottleneck_channels, cfg.norm_groups)

    @property
    def encoder_identifier(self) -> str:
        return getattr(self.encoder, "identifier", type(self.encoder).__name__)

    def train(self, mode: bool = True):
        super().train(mode)
        self.encoder.eval()
        return self

    def trainable_state(self) -> dict:
        return {k: v for k, v in self.state_dict().items() if not k.startswith("encoder.")}

    def _check(self, image: torch.Tensor) -> None:
        total = self.config.strides[-1]
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"expected N x 3 x H x W images, got {tuple(image.shape)}")
        if min(image.shape[-2:]) < total:
            raise ValueError(f"resolution {tuple(image.shape[-2:])} smaller than total stride {total}")

    def encode(self, image: torch.Tensor) -> list:
        self._check(image)
        with torch.no_grad():
            return [f.detach() for f in self.encoder(image)]

    def project(self, pyramid: list) -> list:
        return self.projector(pyramid)

    def bottleneck(self, projected: list):
        z = self.neck(projected)
        g = F.normalize(z.mean(dim=(2, 3)), dim=1)
        return z, g

    def decode(self, z: torch.Tensor, shapes=None) -> list:
        return self.decoder(z, shapes)

    def forward(self, image: torch.Tensor) -> ForwardOutput:
        f = self.encode(image)
        v = self.project(f)
        z, g = self.bottleneck(v)
        f_hat = self.decode(z, [t.shape[-2:] for t in f][::-1])
        return ForwardOutput(f, v, z, g, f_hat)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
