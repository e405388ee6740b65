# losses.py
"""
Training objectives.

Discriminator side: weighted (N+1)-class pixel cross-entropy, multi-scale
patch hinge, LabelMix consistency. Generator side: pixel cross-entropy on the
true class, patch hinge as written (or non-saturating), feature matching.
"""

from __future__ import annotations
import math
from dataclasses import dataclass, asdict
from typing import Dict, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from scene_data import ClassWeights


class NonFiniteLossError(RuntimeError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term} is not finite ({value})")
        self.term = term


# ===== helpers =====
def _labels(onehot: torch.Tensor) -> torch.Tensor:
    """Accept a (B,N,H,W) one-hot or a (B,H,W) index map; return indices."""
    if onehot.dtype in (torch.int64, torch.int32, torch.uint8):
        return onehot.long()
    return onehot.argmax(dim=1)


def _log_probs(x: torch.Tensor, from_logits: bool) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise ValueError("pixel predictions contain non-finite values")
    return F.log_softmax(x, dim=1) if from_logits else torch.log(x)


def _alpha(weights: Optional[ClassWeights], n: int, like: torch.Tensor) -> torch.Tensor:
    if weights is None:
        return torch.ones(n, dtype=like.dtype, device=like.device)
    alpha = weights.alpha.to(dtype=like.dtype, device=like.device)
    if alpha.numel() != n:
        raise ValueError(f"class weights for {alpha.numel()} classes, predictions have {n}")
    return alpha


def weighted_class_ce(log_p: torch.Tensor, labels: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """-mean over pixels of alpha[c] * log p(c) at the true class c."""
    picked = log_p.gather(1, labels.unsqueeze(1)).squeeze(1)
    return -(alpha[labels] * picked).mean()


# ===== pixel level =====
def pixel_loss_terms(real: torch.Tensor, fake: torch.Tensor, onehot: torch.Tensor,
                     weights: Optional[ClassWeights] = None, from_logits: bool = False):
    n_plus = real.shape[1]
    labels = _labels(onehot)
    lp_real = _log_probs(real, from_logits)
    lp_fake = _log_probs(fake, from_logits)
    real_term = weighted_class_ce(lp_real, labels, _alpha(weights, n_plus - 1, lp_real))
    fake_term = -lp_fake[:, n_plus - 1].mean()
    return real_term, fake_term


def pixel_loss_d(real: torch.Tensor, fake: torch.Tensor, onehot: torch.Tensor,
                 weights: Optional[ClassWeights] = None, from_logits: bool = False) -> torch.Tensor:
    real_term, fake_term = pixel_loss_terms(real, fake, onehot, weights, from_logits)
    return real_term + fake_term


def pixel_loss_g(fake: torch.Tensor, onehot: torch.Tensor,
                 weights: Optional[ClassWeights] = None, from_logits: bool = False) -> torch.Tensor:
    lp = _log_probs(fake, from_logits)
    return weighted_class_ce(lp, _labels(onehot), _alpha(weights, fake.shape[1] - 1, lp))


# ===== patch level =====
def ms_patch_loss_d(real_scores: Sequence[torch.Tensor], fake_scores: Sequence[torch.Tensor]) -> torch.Tensor:
    if not real_scores:
        raise ValueError("ms_patch_loss_d needs at least one tap")
    if len(real_scores) != len(fake_scores):
        raise ValueError(f"{len(real_scores)} real taps vs {len(fake_scores)} fake taps")
    per_tap = [F.relu(1.0 - r).mean() + F.relu(1.0 + f).mean() for r, f in zip(real_scores, fake_scores)]
    return torch.stack(per_tap).mean()


def ms_patch_loss_g(fake_scores: Sequence[torch.Tensor], nonsat: bool = False) -> torch.Tensor:
    if not fake_scores:
        raise ValueError("ms_patch_loss_g needs at least one tap")
    if nonsat:
        per_tap = [-f.mean() for f in fake_scores]
    else:
        per_tap = [F.relu(1.0 - f).mean() for f in fake_scores]
    return torch.stack(per_tap).mean()


def feature_match_loss(real_taps: Sequence[torch.Tensor], fake_taps: Sequence[torch.Tensor]) -> torch.Tensor:
    if not real_taps or len(real_taps) != len(fake_taps):
        raise ValueError(f"feature matching needs matching non-empty taps, got {len(real_taps)} and {len(fake_taps)}")
    per_tap = []
    for i, (r, f) in enumerate(zip(real_taps, fake_taps)):
        if r.shape != f.shape:
            raise ValueError(f"tap {i}: real {tuple(r.shape)} vs fake {tuple(f.shape)}")
        per_tap.append((f - r.detach()).pow(2).mean())
    return torch.stack(per_tap).mean()


def generator_loss(fake_pixel: torch.Tensor, onehot: torch.Tensor, weights: Optional[ClassWeights],
                   fake_scores: Sequence[torch.Tensor], fm: Union[torch.Tensor, float] = 0.0,
                   from_logits: bool = False, nonsat: bool = False) -> torch.Tensor:
    total = pixel_loss_g(fake_pixel, onehot, weights, from_logits)
    if fake_scores:
        total = total + ms_patch_loss_g(fake_scores, nonsat=nonsat)
    return total + fm


# ===== LabelMix =====
def labelmix_mask(label, seed: int, mode: str = "component") -> torch.Tensor:
    """Binary (H,W) mask; each region gets an independent fair coin from `seed`."""
    lab = label.cpu().numpy() if isinstance(label, torch.Tensor) else np.asarray(label)
    if lab.ndim != 2:
        raise ValueError(f"expected an (H,W) label map, got shape {lab.shape}")
    rng = np.random.default_rng(seed)
    mask = np.zeros(lab.shape, dtype=np.float32)
    for c in np.unique(lab):
        region = lab == c
        if mode == "class":
            mask[region] = rng.integers(0, 2)
        elif mode == "component":
            comps, k = ndimage.label(region)
            bits = rng.integers(0, 2, size=k + 1).astype(np.float32)
            bits[0] = 0.0
            mask[region] = bits[comps[region]]
        else:
            raise ValueError(f"unknown mask mode {mode!r}")
    return torch.from_numpy(mask)


def labelmix_masks(labels: torch.Tensor, seeds: Sequence[int], mode: str = "component") -> torch.Tensor:
    if labels.shape[0] != len(seeds):
        raise ValueError(f"{labels.shape[0]} label maps but {len(seeds)} seeds")
    masks = [labelmix_mask(l, s, mode) for l, s in zip(labels, seeds)]
    return torch.stack(masks).unsqueeze(1).to(labels.device)


def labelmix(x: torch.Tensor, xhat: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if x.shape != xhat.shape:
        raise ValueError(f"cannot mix {tuple(x.shape)} with {tuple(xhat.shape)}")
    try:
        ok = torch.broadcast_shapes(mask.shape, x.shape) == x.shape
    except RuntimeError:
        ok = False
    if not ok:
        raise ValueError(f"mask {tuple(mask.shape)} does not broadcast over {tuple(x.shape)}")
    mask = mask.to(x.dtype)
    return mask * x + (1 - mask) * xhat


def labelmix_consistency_loss(mix_logits: torch.Tensor, real_logits: torch.Tensor, fake_logits: torch.Tensor,
                              mask: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """|| D(mix(x, x_hat)) - mix(D(x), D(x_hat)) ||^2 per sample, averaged over the batch."""
    target = labelmix(real_logits, fake_logits, mask)
    diff = (mix_logits - target).pow(2)
    if reduction == "mean":
        return diff.mean()
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    if diff.dim() < 4:
        return diff.sum()
    return diff.flatten(1).sum(dim=1).mean()


def discriminator_total_loss(l_pixel, l_ms_d, l_lm, lambda_lm: float = 5.0):
    if lambda_lm < 0:
        raise ValueError(f"lambda_lm must be >= 0, got {lambda_lm}")
    if lambda_lm == 0:
        return l_pixel + l_ms_d
    return l_pixel + l_ms_d + lambda_lm * l_lm


# ===== reporting =====
@dataclass
class LossReport:
    l_pixel_real: float = 0.0
    l_pixel_fake: float = 0.0
    l_ms_d: float = 0.0
    l_ms_g: float = 0.0
    l_fm: float = 0.0
    l_lm: float = 0.0
    l_pixel_g: float = 0.0
    l_g_total: float = 0.0
    l_d_total: float = 0.0

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)

    def summary(self) -> str:
        return " ".join(f"{k[2:]}={v:.4f}" for k, v in self.as_dict().items())


def check_finite(terms: Dict[str, torch.Tensor]) -> Dict[str, float]:
    """Materialize tensors as floats; the first non-finite term aborts the step."""
    out = {}
    for name, t in terms.items():
        v = float(t.detach()) if isinstance(t, torch.Tensor) else float(t)
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
        out[name] = v
    return out
