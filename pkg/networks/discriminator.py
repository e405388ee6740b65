# networks/discriminator.py
"""
U-Net discriminator with an (N+1)-class per-pixel head.

Encoder: ResBlock-Down chain from R to 4x4. Decoder: ResBlock-Up chain back to
R, every up block after the first taking the matching encoder output as skip.
Patch heads score tapped encoder (or decoder) features; decoder/encoder taps
are returned for feature matching.
"""

from __future__ import annotations
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from config import TrainConfig
from networks.blocks import ResBlockD, conv2d

ENC_WIDTHS = (128, 128, 256, 256, 512, 512)
DEC_WIDTHS = (512, 256, 256, 128, 128, 64)


def num_blocks(resolution: int) -> int:
    if resolution < 16 or resolution & (resolution - 1):
        raise ValueError(f"resolution must be a power of two >= 16, got {resolution}")
    return int(math.log2(resolution // 4))


def _table(full: Sequence[int], n: int, divisor: int) -> List[int]:
    ws = list(full)
    while len(ws) < n:
        ws.insert(0, ws[0])
    return [max(1, w // divisor) for w in ws[-n:]]


def encoder_widths(resolution: int, divisor: int) -> List[int]:
    return _table(ENC_WIDTHS, num_blocks(resolution), divisor)


def decoder_widths(resolution: int, divisor: int) -> List[int]:
    return _table(DEC_WIDTHS, num_blocks(resolution), divisor)


def patch_tap_indices(n: int) -> Tuple[int, int]:
    """Encoder blocks feeding patch heads: 4th and 6th at full depth, else the two deepest."""
    return (3, 5) if n == 6 else (n - 2, n - 1)


class PatchHead(nn.Module):
    """(conv-ReLU-BN) x2, then a 1x1 conv to one score per location."""

    def __init__(self, in_nc: int, sn: bool = True):
        super().__init__()
        hidden = max(1, in_nc // 2)
        self.conv_0 = conv2d(in_nc, hidden, 3, sn=sn)
        self.norm_0 = nn.BatchNorm2d(hidden)
        self.conv_1 = conv2d(hidden, hidden, 3, sn=sn)
        self.norm_1 = nn.BatchNorm2d(hidden)
        self.out = conv2d(hidden, 1, 1, bias=not sn, sn=sn)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.norm_0(F.relu(self.conv_0(x)))
        x = self.norm_1(F.relu(self.conv_1(x)))
        return self.out(x)[:, 0]


@dataclass
class DiscriminatorOutput:
    pixel_logits: torch.Tensor                              # (B, N+1, H, W)
    patch_scores: List[torch.Tensor] = field(default_factory=list)   # (B, Hi, Wi) each
    decoder_taps: List[torch.Tensor] = field(default_factory=list)
    encoder_taps: List[torch.Tensor] = field(default_factory=list)
    fm_placement: str = "dec"

    def fm_taps(self) -> List[torch.Tensor]:
        if self.fm_placement == "dec":
            return self.decoder_taps
        if self.fm_placement == "enc":
            return self.encoder_taps
        if self.fm_placement == "both":
            return self.encoder_taps + self.decoder_taps
        return []

    def split(self, batch: int) -> Tuple["DiscriminatorOutput", "DiscriminatorOutput"]:
        """Split a joint real+fake evaluation into its first `batch` rows and the rest."""
        def cut(ts, lo, hi):
            return [t[lo:hi] for t in ts]

        parts = []
        for lo, hi in ((0, batch), (batch, None)):
            parts.append(DiscriminatorOutput(
                pixel_logits=self.pixel_logits[lo:hi],
                patch_scores=cut(self.patch_scores, lo, hi),
                decoder_taps=cut(self.decoder_taps, lo, hi),
                encoder_taps=cut(self.encoder_taps, lo, hi),
                fm_placement=self.fm_placement,
            ))
        return parts[0], parts[1]


class UNetDiscriminator(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.resolution = cfg.resolution
        self.num_classes = cfg.num_classes
        self.ms_placement = cfg.effective_ms
        self.fm_placement = cfg.effective_fm
        sn = cfg.spectral_norm_d

        n = num_blocks(cfg.resolution)
        enc = encoder_widths(cfg.resolution, cfg.width_divisor)
        dec = decoder_widths(cfg.resolution, cfg.width_divisor)
        self.enc_widths, self.dec_widths = enc, dec

        self.down = nn.ModuleList()
        fin = 3
        for i, w in enumerate(enc):
            self.down.append(ResBlockD(fin, w, "down", first=(i == 0), sn=sn))
            fin = w

        self.up = nn.ModuleList()
        fin = enc[-1]
        for i, w in enumerate(dec):
            skip_nc = enc[n - 1 - i] if i > 0 else 0
            self.up.append(ResBlockD(fin + skip_nc, w, "up", sn=sn))
            fin = w
        self.layer_out = conv2d(dec[-1], cfg.num_classes + 1, 1, sn=sn)

        self.enc_patch_taps: Tuple[int, ...] = ()
        self.dec_patch_taps: Tuple[int, ...] = ()
        if self.ms_placement in ("enc", "both"):
            self.enc_patch_taps = patch_tap_indices(n)
        if self.ms_placement in ("dec", "both"):
            # two lowest-resolution decoder taps
            self.dec_patch_taps = tuple(range(1, min(3, n)))
        self.enc_heads = nn.ModuleList(PatchHead(enc[i], sn=sn) for i in self.enc_patch_taps)
        self.dec_heads = nn.ModuleList(PatchHead(dec[i], sn=sn) for i in self.dec_patch_taps)

    def forward(self, image: torch.Tensor) -> DiscriminatorOutput:
        r = self.resolution
        if image.dim() != 4 or tuple(image.shape[1:]) != (3, r, r):
            raise ValueError(f"expected images of shape (B,3,{r},{r}), got {tuple(image.shape)}")
        n = len(self.down)

        feats = []
        x = image
        for block in self.down:
            x = block(x)
            feats.append(x)

        ups = []
        y = feats[-1]
        for i, block in enumerate(self.up):
            y = block(y, feats[n - 1 - i] if i > 0 else None)
            ups.append(y)

        scores = [head(feats[i]) for head, i in zip(self.enc_heads, self.enc_patch_taps)]
        scores += [head(ups[i]) for head, i in zip(self.dec_heads, self.dec_patch_taps)]
        return DiscriminatorOutput(
            pixel_logits=self.layer_out(y),
            patch_scores=scores,
            decoder_taps=ups[1:],
            encoder_taps=feats[1:],
            fm_placement=self.fm_placement,
        )


def discriminate(image: torch.Tensor, discriminator: UNetDiscriminator) -> DiscriminatorOutput:
    return discriminator(image)


def pixel_probabilities(logits: torch.Tensor) -> torch.Tensor:
    shifted = logits - logits.amax(dim=-3, keepdim=True)
    return F.softmax(shifted, dim=-3)


def parameter_report(params: Union[nn.Module, Iterable[torch.Tensor]]) -> int:
    if isinstance(params, nn.Module):
        params = params.parameters()
    return sum(p.numel() for p in params if p.requires_grad)
