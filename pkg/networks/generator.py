# networks/generator.py
"""
Dual-pyramid generator.

- AdaptationPyramid: ConvBlock chain over z (+) onehot at full resolution, then
  stride-2 blocks down to 8x8. Every stride-2 input/output is an alpha.
- Each SPADE rung i (input resolution 8 * 2**i) is conditioned on
  alpha_i (+) Up(alpha_0); the "oa" variant conditions on the nearest-subsampled
  z (+) onehot instead (single pyramid).
- Widths follow the 256-pixel tables divided by `width_divisor`.
"""

from __future__ import annotations
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from config import TrainConfig
from networks.blocks import (
    LRELU_SLOPE, ConvBlock, SpadeParams, SpadeResBlock, conv2d,
    downsample_nearest, upsample_nearest,
)

BOTTOM = 8
SAP_WIDTHS = (32, 64)                            # stem, alpha
ISP_WIDTHS = (1024, 1024, 512, 256, 128, 64)     # up_0 .. up_5 at R=256


def _width(w: int, divisor: int) -> int:
    return max(1, w // divisor)


def num_rungs(resolution: int) -> int:
    if resolution < 16 or resolution & (resolution - 1):
        raise ValueError(f"resolution must be a power of two >= 16, got {resolution}")
    return int(math.log2(resolution // BOTTOM))


def isp_widths(resolution: int, divisor: int) -> List[int]:
    """Channel count of up_0 followed by the output of every SPADE rung."""
    k = num_rungs(resolution)
    full = list(ISP_WIDTHS)
    while len(full) < k + 1:
        full.insert(0, full[0])
    return [_width(w, divisor) for w in full[-(k + 1):]]


@dataclass
class AdaptationFeatures:
    stem: torch.Tensor
    alphas: List[torch.Tensor]   # alphas[0] at 8x8 ... alphas[-1] at full resolution

    def ladder(self) -> List[torch.Tensor]:
        """Tensors in pyramid order: stem, full resolution alpha, ..., 8x8 alpha."""
        return [self.stem, *reversed(self.alphas)]


class AdaptationPyramid(nn.Module):
    def __init__(self, in_nc: int, resolution: int, divisor: int = 1, sn: bool = False):
        super().__init__()
        self.resolution = resolution
        stem_nc, alpha_nc = (_width(w, divisor) for w in SAP_WIDTHS)
        self.alpha_nc = alpha_nc
        self.stem = ConvBlock(in_nc, stem_nc, sn=sn)
        self.top = ConvBlock(stem_nc, alpha_nc, sn=sn)
        self.down = nn.ModuleList(ConvBlock(alpha_nc, alpha_nc, stride=2, sn=sn)
                                  for _ in range(num_rungs(resolution)))

    def forward(self, zy: torch.Tensor) -> AdaptationFeatures:
        if tuple(zy.shape[-2:]) != (self.resolution, self.resolution):
            raise ValueError(f"pyramid built for {self.resolution}px, got input {tuple(zy.shape[-2:])}")
        stem = self.stem(zy)
        a = self.top(stem)
        feats = [a]
        for block in self.down:
            a = block(a)
            feats.append(a)
        return AdaptationFeatures(stem=stem, alphas=feats[::-1])


def adaptation_pyramid(zy: torch.Tensor, pyramid: AdaptationPyramid) -> AdaptationFeatures:
    return pyramid(zy)


def conditioning_input(alpha_i: torch.Tensor, alpha_0: torch.Tensor, no_cat: bool = False) -> torch.Tensor:
    """alpha_i (+) Up(alpha_0), or alpha_i alone for the no-cat ablation."""
    if no_cat:
        return alpha_i
    if alpha_i.shape[0] != alpha_0.shape[0] or alpha_i.shape[1] != alpha_0.shape[1]:
        raise ValueError(f"alpha_i {tuple(alpha_i.shape)} and alpha_0 {tuple(alpha_0.shape)} disagree on batch/channels")
    size, base = alpha_i.shape[-1], alpha_0.shape[-1]
    if size % base or alpha_i.shape[-2] != size:
        raise ValueError(f"alpha_i at {tuple(alpha_i.shape[-2:])} is not a multiple of alpha_0 at {base}")
    return torch.cat([alpha_i, upsample_nearest(alpha_0, size // base)], dim=1)


def conditioning(alpha_i: torch.Tensor, alpha_0: torch.Tensor, spade, no_cat: bool = False) -> SpadeParams:
    return spade.params(conditioning_input(alpha_i, alpha_0, no_cat))


def legacy_single_pyramid_conditioning(label: torch.Tensor, size: int) -> torch.Tensor:
    """Single-pyramid conditioning: the label input subsampled to the rung resolution."""
    return downsample_nearest(label, size)


def sample_noise(seed: Optional[int] = None, mode: str = "tiled", batch: int = 1, z_dim: int = 64,
                 size: int = 64, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    gen = generator if generator is not None else torch.Generator().manual_seed(0 if seed is None else seed)
    if mode == "tiled":
        v = torch.randn(batch, z_dim, 1, 1, generator=gen)
        return v.expand(batch, z_dim, size, size).contiguous()
    if mode == "per_pixel":
        return torch.randn(batch, z_dim, size, size, generator=gen)
    raise ValueError(f"unknown noise mode {mode!r}")


class Generator(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        self.resolution = cfg.resolution
        self.num_classes = cfg.num_classes
        self.z_dim = cfg.z_dim
        self.variant = cfg.gen
        self.no_cat = cfg.no_cat
        self.route_top_alpha = cfg.route_top_alpha and cfg.gen == "dp"
        sn = cfg.spectral_norm_g

        in_nc = cfg.z_dim + cfg.num_classes
        widths = isp_widths(cfg.resolution, cfg.width_divisor)
        self.widths = widths

        self.pyramid: Optional[AdaptationPyramid] = None
        if cfg.gen == "dp":
            self.pyramid = AdaptationPyramid(in_nc, cfg.resolution, cfg.width_divisor, sn=sn)
            a_nc = self.pyramid.alpha_nc
            cond_nc = a_nc if cfg.no_cat else 2 * a_nc
        else:
            cond_nc = in_nc

        self.head = conv2d(in_nc, widths[0], 3, sn=sn)
        self.rungs = nn.ModuleList(
            SpadeResBlock(widths[i], widths[i + 1], cond_nc, sn=sn) for i in range(len(widths) - 1)
        )
        final_nc = widths[-1] + (self.pyramid.alpha_nc if self.route_top_alpha else 0)
        self.conv_img = conv2d(final_nc, 3, 3, sn=sn)

    def _conditions(self, zy: torch.Tensor) -> Tuple[List[torch.Tensor], Optional[AdaptationFeatures]]:
        if self.pyramid is None:
            return [legacy_single_pyramid_conditioning(zy, BOTTOM * 2 ** i) for i in range(len(self.rungs))], None
        feats = self.pyramid(zy)
        a0 = feats.alphas[0]
        return [conditioning_input(feats.alphas[i], a0, self.no_cat) for i in range(len(self.rungs))], feats

    def _zy(self, onehot: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        r = self.resolution
        if tuple(onehot.shape[-3:]) != (self.num_classes, r, r):
            raise ValueError(f"label must be ({self.num_classes},{r},{r}), got {tuple(onehot.shape[-3:])}")
        if tuple(z.shape[-3:]) != (self.z_dim, r, r) or z.shape[0] != onehot.shape[0]:
            raise ValueError(f"noise must be (B,{self.z_dim},{r},{r}), got {tuple(z.shape)}")
        return torch.cat([z, onehot], dim=1)

    def conditioning_for(self, onehot: torch.Tensor, z: torch.Tensor, rung: int) -> SpadeParams:
        conds, _ = self._conditions(self._zy(onehot, z))
        return self.rungs[rung].norm_0.params(conds[rung])

    def forward(self, onehot: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        zy = self._zy(onehot, z)
        conds, feats = self._conditions(zy)
        x = self.head(downsample_nearest(zy, BOTTOM))
        for rung, cond in zip(self.rungs, conds):
            x = rung(x, cond)
        x = F.leaky_relu(x, LRELU_SLOPE)
        if self.route_top_alpha:
            x = torch.cat([x, feats.alphas[-1]], dim=1)
        return torch.tanh(self.conv_img(x))


def synthesize(z: torch.Tensor, label: torch.Tensor, generator: Generator) -> torch.Tensor:
    return generator(label, z)
