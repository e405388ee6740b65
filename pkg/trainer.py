# trainer.py
"""
Alternating adversarial training: one discriminator step, then one generator
step, then an EMA update of the generator weights.
"""

from __future__ import annotations
import copy
import io
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Union

import numpy as np
import torch
import torch.nn as nn
from dotenv import dotenv_values
from torch.utils.data import DataLoader, Dataset, Sampler
from tqdm import tqdm

import checkpoint
from checkpoint import CheckpointError
from config import DEVICE, TrainConfig, apply_overrides, dump_config
from losses import (
    LossReport, check_finite, discriminator_total_loss, feature_match_loss, labelmix,
    labelmix_consistency_loss, labelmix_masks, ms_patch_loss_d, ms_patch_loss_g,
    pixel_loss_g, pixel_loss_terms,
)
from networks.discriminator import UNetDiscriminator
from networks.generator import Generator, sample_noise
from scene_data import ClassWeights, class_frequencies, dataset_class_weights, one_hot

log = logging.getLogger(__name__)


@dataclass
class TrainState:
    cfg: TrainConfig
    G: Generator
    D: UNetDiscriminator
    G_ema: Generator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    noise: torch.Generator
    step: int = 0
    device: str = "cpu"
    class_weights: Optional[ClassWeights] = None
    history: List[LossReport] = field(default_factory=list)


def seed_everything(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(deterministic, warn_only=True)
    torch.backends.cudnn.deterministic = deterministic
    torch.backends.cudnn.benchmark = not deterministic


def build_optimizers(G: nn.Module, D: nn.Module, cfg: TrainConfig):
    betas = (cfg.beta1, cfg.beta2)
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.lr_g, betas=betas, eps=cfg.adam_eps)
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr_d, betas=betas, eps=cfg.adam_eps)
    return opt_g, opt_d


def build_state(cfg: TrainConfig, device: str = DEVICE) -> TrainState:
    cfg.validate()
    seed_everything(cfg.seed, cfg.deterministic)
    G = Generator(cfg).to(device)
    D = UNetDiscriminator(cfg).to(device)
    G_ema = copy.deepcopy(G).requires_grad_(False)
    opt_g, opt_d = build_optimizers(G, D, cfg)
    noise = torch.Generator().manual_seed(cfg.seed)
    log.info("built %s/%s networks at %dpx (G %d params, D %d params)", cfg.gen, cfg.dis, cfg.resolution,
             sum(p.numel() for p in G.parameters()), sum(p.numel() for p in D.parameters()))
    return TrainState(cfg=cfg, G=G, D=D, G_ema=G_ema, opt_g=opt_g, opt_d=opt_d, noise=noise, device=device)


@torch.no_grad()
def ema_update(ema: Union[nn.Module, Iterable[torch.Tensor]], params: Union[nn.Module, Iterable[torch.Tensor]],
               decay: float):
    """ema <- decay * ema + (1 - decay) * params, in place. Module buffers are copied."""
    if isinstance(ema, nn.Module):
        for eb, b in zip(ema.buffers(), params.buffers()):
            eb.copy_(b)
        ema_ps, ps = list(ema.parameters()), list(params.parameters())
    else:
        ema_ps, ps = list(ema), list(params)
    if len(ema_ps) != len(ps):
        raise ValueError(f"ema has {len(ema_ps)} tensors, model has {len(ps)}")
    for e, p in zip(ema_ps, ps):
        if e.shape != p.shape:
            raise ValueError(f"ema tensor {tuple(e.shape)} vs parameter {tuple(p.shape)}")
        e.mul_(decay).add_(p, alpha=1.0 - decay)
    return ema


def _noise(state: TrainState, batch: int) -> torch.Tensor:
    cfg = state.cfg
    z = sample_noise(mode=cfg.z_mode, batch=batch, z_dim=cfg.z_dim, size=cfg.resolution, generator=state.noise)
    return z.to(state.device)


def train_step(state: TrainState, batch, z: Optional[torch.Tensor] = None) -> LossReport:
    """One D update then one G update. A given `z` is used for both instead of fresh noise."""
    cfg, G, D = state.cfg, state.G, state.D
    label, image = batch
    label, image = label.to(state.device).long(), image.to(state.device)
    B = label.shape[0]
    if B != cfg.batch_size:
        raise ValueError(f"batch of {B} scenes, config expects {cfg.batch_size}")
    if z is not None:
        z = z.to(state.device)
        expected = (B, cfg.z_dim, cfg.resolution, cfg.resolution)
        if tuple(z.shape) != expected:
            raise ValueError(f"fixed noise must be {expected}, got {tuple(z.shape)}")
    onehot = one_hot(label, cfg.num_classes)
    weights = state.class_weights if cfg.class_weights == "dataset" and state.class_weights is not None \
        else class_frequencies(label.cpu(), cfg.num_classes)
    zero = image.new_zeros(())
    G.train()
    D.train()

    # discriminator
    D.requires_grad_(True)
    with torch.no_grad():
        fake = G(onehot, _noise(state, B) if z is None else z)
    real_o, fake_o = D(torch.cat([image, fake])).split(B)
    l_real, l_fake = pixel_loss_terms(real_o.pixel_logits, fake_o.pixel_logits, label, weights, from_logits=True)
    l_ms_d = ms_patch_loss_d(real_o.patch_scores, fake_o.patch_scores) if real_o.patch_scores else zero
    l_lm = zero
    if cfg.use_labelmix:
        seeds = torch.randint(0, 2**31 - 1, (B,), generator=state.noise).tolist()
        mask = labelmix_masks(label, seeds, cfg.mask_mode)
        mix_logits = D(labelmix(image, fake, mask)).pixel_logits
        l_lm = labelmix_consistency_loss(mix_logits, real_o.pixel_logits, fake_o.pixel_logits, mask, cfg.lm_reduction)
    l_d = discriminator_total_loss(l_real + l_fake, l_ms_d, l_lm, cfg.lambda_lm if cfg.use_labelmix else 0.0)
    d_vals = check_finite({"l_pixel_real": l_real, "l_pixel_fake": l_fake, "l_ms_d": l_ms_d,
                           "l_lm": l_lm, "l_d_total": l_d})
    state.opt_d.zero_grad(set_to_none=True)
    l_d.backward()
    state.opt_d.step()

    # generator
    D.requires_grad_(False)
    fake = G(onehot, _noise(state, B) if z is None else z)
    real_o, fake_o = D(torch.cat([image, fake])).split(B)
    l_pix_g = pixel_loss_g(fake_o.pixel_logits, label, weights, from_logits=True)
    l_ms_g = ms_patch_loss_g(fake_o.patch_scores, nonsat=cfg.nonsat_g_hinge) if fake_o.patch_scores else zero
    taps = fake_o.fm_taps()
    l_fm = feature_match_loss(real_o.fm_taps(), taps) if taps else zero
    l_g = l_pix_g + l_ms_g + l_fm
    g_vals = check_finite({"l_pixel_g": l_pix_g, "l_ms_g": l_ms_g, "l_fm": l_fm, "l_g_total": l_g})
    state.opt_g.zero_grad(set_to_none=True)
    l_g.backward()
    state.opt_g.step()
    D.requires_grad_(True)

    ema_update(state.G_ema, G, cfg.ema_decay)
    state.step += 1
    return LossReport(**d_vals, **g_vals)


class StepBatchSampler(Sampler):
    """Batch order as a pure function of (seed, step): epoch e uses a permutation seeded by (seed, e)."""

    def __init__(self, size: int, batch_size: int, seed: int, start: int = 0, stop: Optional[int] = None):
        if size < batch_size:
            raise ValueError(f"dataset of {size} scenes is smaller than batch size {batch_size}")
        self.size, self.batch_size, self.seed = size, batch_size, seed
        self.start, self.stop = start, stop
        self.per_epoch = size // batch_size
        self._perm_epoch, self._perm = -1, None

    def batch(self, step: int) -> List[int]:
        epoch, j = divmod(step, self.per_epoch)
        if epoch != self._perm_epoch:
            self._perm = np.random.default_rng([self.seed, epoch]).permutation(self.size)
            self._perm_epoch = epoch
        return self._perm[j * self.batch_size:(j + 1) * self.batch_size].tolist()

    def __iter__(self) -> Iterator[List[int]]:
        step = self.start
        while self.stop is None or step < self.stop:
            yield self.batch(step)
            step += 1

    def __len__(self) -> int:
        if self.stop is None:
            raise TypeError("unbounded sampler has no length")
        return max(0, self.stop - self.start)


def fit(state: TrainState, dataset: Dataset, steps: int, log_every: int = 50,
        on_step: Optional[Callable[[TrainState, LossReport], None]] = None,
        progress: bool = False) -> List[LossReport]:
    """Run `steps` more training steps, resuming the batch order at `state.step`."""
    cfg = state.cfg
    if cfg.class_weights == "dataset" and state.class_weights is None:
        state.class_weights = dataset_class_weights(dataset, cfg.num_classes)
    sampler = StepBatchSampler(len(dataset), cfg.batch_size, cfg.seed, start=state.step, stop=state.step + steps)
    loader = DataLoader(dataset, batch_sampler=sampler, num_workers=cfg.num_workers)
    reports = []
    for batch in tqdm(loader, total=steps, desc="train", disable=not progress):
        report = train_step(state, batch)
        reports.append(report)
        state.history.append(report)
        if log_every and state.step % log_every == 0:
            log.info("step %d: %s", state.step, report.summary())
        if on_step is not None:
            on_step(state, report)
    return reports


# ===== checkpoints =====
_OPT_KEYS = ("step", "exp_avg", "exp_avg_sq")


def state_tensors(state: TrainState) -> "OrderedDict[str, torch.Tensor]":
    out: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for prefix, module in (("G.", state.G), ("D.", state.D), ("G_ema.", state.G_ema)):
        for k, v in module.state_dict().items():
            out[prefix + k] = v
    for name, opt in (("opt_g", state.opt_g), ("opt_d", state.opt_d)):
        for idx, entry in sorted(opt.state_dict()["state"].items()):
            for key in _OPT_KEYS:
                v = entry[key]
                out[f"{name}.{idx}.{key}"] = v if isinstance(v, torch.Tensor) else torch.tensor(float(v))
    out["meta.step"] = torch.tensor(state.step, dtype=torch.int64)
    out["rng.noise"] = state.noise.get_state()
    out["meta.config"] = checkpoint.text_tensor(dump_config(state.cfg))
    return out


def save_checkpoint(state: TrainState, path: str) -> None:
    checkpoint.write(path, state_tensors(state))
    log.info("checkpoint at step %d -> %s", state.step, path)


def stored_config(tensors: Dict[str, torch.Tensor]) -> TrainConfig:
    if "meta.config" not in tensors:
        raise CheckpointError("checkpoint has no meta.config")
    values = dotenv_values(stream=io.StringIO(checkpoint.tensor_text(tensors["meta.config"])))
    return apply_overrides(TrainConfig(), values, strict=False)


def _load_optimizer(opt: torch.optim.Optimizer, tensors: Dict[str, torch.Tensor], name: str) -> None:
    sd = opt.state_dict()
    entries: Dict[int, Dict[str, torch.Tensor]] = {}
    for key, t in tensors.items():
        if not key.startswith(name + "."):
            continue
        _, idx, field_name = key.split(".")
        entries.setdefault(int(idx), {})[field_name] = t
    for idx, entry in entries.items():
        missing = [k for k in _OPT_KEYS if k not in entry]
        if missing:
            raise CheckpointError(f"{name}.{idx} is missing {missing[0]}")
    sd["state"] = entries
    opt.load_state_dict(sd)


def load_checkpoint(path: str, cfg: Optional[TrainConfig] = None, device: str = DEVICE) -> TrainState:
    """Rebuild a TrainState from `path`; with `cfg`, shapes are checked against that config."""
    tensors = checkpoint.read(path)
    state = build_state(cfg or stored_config(tensors), device)
    for prefix, module in (("G.", state.G), ("D.", state.D), ("G_ema.", state.G_ema)):
        checkpoint.load_module_state(module, tensors, prefix)
    _load_optimizer(state.opt_g, tensors, "opt_g")
    _load_optimizer(state.opt_d, tensors, "opt_d")
    for key in ("meta.step", "rng.noise"):
        if key not in tensors:
            raise CheckpointError(f"checkpoint is missing {key}")
    state.step = int(tensors["meta.step"])
    state.noise.set_state(tensors["rng.noise"].clone())
    log.info("resumed %s at step %d", path, state.step)
    return state
