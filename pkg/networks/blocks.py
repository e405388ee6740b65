# networks/blocks.py
"""
Building blocks shared by the generator, the discriminator and the toy segmenter.

SPADE here is Eq.-1 style: a parameter-free batch standardization (statistics
over n, x, y) followed by exactly one per-pixel affine (gamma, beta) produced
from the conditioning input.
"""

from __future__ import annotations
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import spectral_norm

EPS = 1e-5
LRELU_SLOPE = 0.2


@dataclass
class NormStats:
    mu: torch.Tensor      # (C,)
    sigma: torch.Tensor   # (C,)


@dataclass
class SpadeParams:
    gamma: torch.Tensor
    beta: torch.Tensor


# ===== Statistics and modulation =====
def compute_norm_stats(h: torch.Tensor, eps: float = EPS) -> NormStats:
    if h.dim() != 4 or h.shape[0] == 0:
        raise ValueError(f"expected a non-empty (B,C,H,W) batch, got shape {tuple(h.shape)}")
    mu = h.mean(dim=(0, 2, 3))
    var = h.var(dim=(0, 2, 3), unbiased=False)
    return NormStats(mu=mu, sigma=torch.sqrt(var + eps))


def spade_modulate(h: torch.Tensor, params: SpadeParams, stats: NormStats) -> torch.Tensor:
    for name, t in (("gamma", params.gamma), ("beta", params.beta)):
        try:
            shape = torch.broadcast_shapes(t.shape, h.shape)
        except RuntimeError:
            shape = None
        if shape != h.shape:
            raise ValueError(f"{name} of shape {tuple(t.shape)} does not match activation {tuple(h.shape)}")
    if stats.mu.shape[0] != h.shape[1]:
        raise ValueError(f"stats for {stats.mu.shape[0]} channels, activation has {h.shape[1]}")
    mu = stats.mu[None, :, None, None]
    sigma = stats.sigma[None, :, None, None]
    return params.gamma * (h - mu) / sigma + params.beta


# ===== Resampling =====
def upsample_nearest(x: torch.Tensor, factor: int) -> torch.Tensor:
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsampling factor must be a positive integer, got {factor}")
    if factor == 1:
        return x
    return F.interpolate(x, scale_factor=int(factor), mode="nearest")


def downsample_nearest(x: torch.Tensor, target: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    if target < 1 or h % target or w % target or h // target != w // target:
        raise ValueError(f"cannot subsample {h}x{w} to {target}x{target} by an integer stride")
    f = h // target
    return x if f == 1 else x[..., ::f, ::f]


def match_skip(x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
    if skip.shape[-2:] != x.shape[-2:]:
        raise ValueError(f"skip at {tuple(skip.shape[-2:])} does not match decoder input at {tuple(x.shape[-2:])}")
    return torch.cat([x, skip], dim=1)


# ===== Layers =====
def init_conv(conv: nn.Conv2d) -> nn.Conv2d:
    if conv.weight.is_meta:
        return conv
    nn.init.orthogonal_(conv.weight)
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)
    return conv


def spectral(module: nn.Module, enabled: bool) -> nn.Module:
    return spectral_norm(module) if enabled else module


def conv2d(in_nc: int, out_nc: int, kernel: int = 3, stride: int = 1,
           bias: bool = True, sn: bool = False) -> nn.Module:
    conv = nn.Conv2d(in_nc, out_nc, kernel_size=kernel, stride=stride, padding=kernel // 2, bias=bias)
    return spectral(init_conv(conv), sn)


class ConvBlock(nn.Module):
    """Conv2d 3x3 -> BatchNorm2d -> ReLU."""

    def __init__(self, in_nc: int, out_nc: int, stride: int = 1, sn: bool = False):
        super().__init__()
        self.conv = conv2d(in_nc, out_nc, 3, stride=stride, sn=sn)
        self.norm = nn.BatchNorm2d(out_nc)
        self.stride = stride

    def forward(self, x):
        if x.shape[-1] % self.stride:
            raise ValueError(f"input width {x.shape[-1]} not divisible by stride {self.stride}")
        return F.relu(self.norm(self.conv(x)))


class SPADE(nn.Module):
    def __init__(self, norm_nc: int, cond_nc: int, sn: bool = False, bias: bool = True):
        super().__init__()
        self.conv_gamma = conv2d(cond_nc, norm_nc, 3, bias=bias, sn=sn)
        self.conv_beta = conv2d(cond_nc, norm_nc, 3, bias=bias, sn=sn)

    def params(self, cond: torch.Tensor) -> SpadeParams:
        # gamma is offset by one so an untrained layer starts near identity
        return SpadeParams(gamma=1.0 + self.conv_gamma(cond), beta=self.conv_beta(cond))

    def forward(self, h: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if cond.shape[-2:] != h.shape[-2:]:
            raise ValueError(f"conditioning at {tuple(cond.shape[-2:])} for activation at {tuple(h.shape[-2:])}")
        return spade_modulate(h, self.params(cond), compute_norm_stats(h))


class SpadeResBlock(nn.Module):
    """Pre-activation residual block, two SPADE-conv stages, then x2 nearest upsampling."""

    def __init__(self, fin: int, fout: int, cond_nc: int, sn: bool = False,
                 bias: bool = True, upsample: bool = True):
        super().__init__()
        fmid = min(fin, fout)
        self.learned_shortcut = fin != fout
        self.upsample = upsample
        self.norm_0 = SPADE(fin, cond_nc, sn=sn, bias=bias)
        self.conv_0 = conv2d(fin, fmid, 3, bias=bias, sn=sn)
        self.norm_1 = SPADE(fmid, cond_nc, sn=sn, bias=bias)
        self.conv_1 = conv2d(fmid, fout, 3, bias=bias, sn=sn)
        if self.learned_shortcut:
            self.norm_s = SPADE(fin, cond_nc, sn=sn, bias=bias)
            self.conv_s = conv2d(fin, fout, 1, bias=False, sn=sn)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if cond.shape[-2:] != x.shape[-2:]:
            raise ValueError(f"conditioning at {tuple(cond.shape[-2:])} for activation at {tuple(x.shape[-2:])}")
        x_s = self.conv_s(self.norm_s(x, cond)) if self.learned_shortcut else x
        dx = self.conv_0(F.leaky_relu(self.norm_0(x, cond), LRELU_SLOPE))
        dx = self.conv_1(F.leaky_relu(self.norm_1(dx, cond), LRELU_SLOPE))
        out = x_s + dx
        return upsample_nearest(out, 2) if self.upsample else out


class ResBlockD(nn.Module):
    """Discriminator residual block halving ("down") or doubling ("up") the resolution."""

    def __init__(self, fin: int, fout: int, direction: str, first: bool = False, sn: bool = True):
        super().__init__()
        if direction not in ("down", "up"):
            raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")
        self.direction = direction
        self.first = first
        self.conv1 = conv2d(fin, fout, 3, sn=sn)
        self.conv2 = conv2d(fout, fout, 3, sn=sn)
        self.learned_shortcut = fin != fout
        if self.learned_shortcut:
            self.conv_s = conv2d(fin, fout, 1, bias=False, sn=sn)

    def _resample(self, x):
        if self.direction == "up":
            return upsample_nearest(x, 2)
        return downsample_nearest(x, x.shape[-1] // 2)

    def forward(self, x: torch.Tensor, skip: Optional[torch.Tensor] = None) -> torch.Tensor:
        if skip is not None:
            x = match_skip(x, skip)
        x_s = self._resample(self.conv_s(x) if self.learned_shortcut else x)
        dx = x if self.first else F.leaky_relu(x, LRELU_SLOPE)
        if self.direction == "up":
            dx = upsample_nearest(dx, 2)
        dx = self.conv2(F.leaky_relu(self.conv1(dx), LRELU_SLOPE))
        if self.direction == "down":
            dx = self._resample(dx)
        return x_s + dx


def resblock_down(x: torch.Tensor, block: ResBlockD) -> torch.Tensor:
    if block.direction != "down":
        raise ValueError("resblock_down needs a 'down' block")
    return block(x)


def resblock_up(x: torch.Tensor, skip: Optional[torch.Tensor], block: ResBlockD) -> torch.Tensor:
    if block.direction != "up":
        raise ValueError("resblock_up needs an 'up' block")
    return block(x, skip)
