# evaluation.py
"""
Desk-scale metrics: Frechet distance on segmenter embeddings (toy-FID), mIoU
from the frozen segmenter, object-crop FID by size bucket, FID over several
noise draws and over several resolutions.
"""

from __future__ import annotations
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from scipy import linalg, ndimage

from networks.generator import Generator, sample_noise
from scene_data import DatasetMeta, one_hot

log = logging.getLogger(__name__)

Embedder = Callable[[torch.Tensor], torch.Tensor]

BUCKETS = ("large", "medium", "small")
CROP_SIZE = 32
MIN_FID_IMAGES = 16
EIG_CLAMP = -1e-8


@dataclass
class GaussianStats:
    mu: np.ndarray      # (d,)
    sigma: np.ndarray   # (d, d)


def fit_gaussian(features) -> GaussianStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValueError(f"need at least 2 samples to fit a Gaussian, got {x.shape[0]}")
    mu = x.mean(axis=0)
    sigma = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    return GaussianStats(mu=mu, sigma=sigma)


def _psd_eig(m: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    w, v = linalg.eigh((m + m.T) / 2.0)
    if (w < EIG_CLAMP * max(1.0, float(np.abs(w).max(initial=0.0)))).any():
        log.warning("clamping negative eigenvalue %.3g to 0", float(w.min()))
    return np.clip(w, 0.0, None), v


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = _psd_eig(m)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    for name, s in (("a", a), ("b", b)):
        if not (np.isfinite(s.mu).all() and np.isfinite(s.sigma).all()):
            raise ValueError(f"non-finite statistics in {name}")
    if a.mu.shape != b.mu.shape:
        raise ValueError(f"dimension mismatch: {a.mu.shape[0]} vs {b.mu.shape[0]}")
    # Tr((S1 S2)^1/2) = Tr((S1^1/2 S2 S1^1/2)^1/2), the latter symmetric PSD
    root = _sqrtm_psd(a.sigma)
    w, _ = _psd_eig(root @ b.sigma @ root)
    diff = a.mu - b.mu
    d = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * np.sqrt(w).sum())
    return max(d, 0.0)


@torch.no_grad()
def embed(images: torch.Tensor, embedder: Embedder, batch_size: int = 64) -> np.ndarray:
    out = [embedder(images[i:i + batch_size]).double().cpu() for i in range(0, images.shape[0], batch_size)]
    return torch.cat(out).numpy()


def toy_fid(real: torch.Tensor, fake: torch.Tensor, embedder: Embedder,
            min_images: int = MIN_FID_IMAGES) -> float:
    for name, t in (("real", real), ("fake", fake)):
        if t.shape[0] < min_images:
            raise ValueError(f"toy-FID needs >= {min_images} {name} images, got {t.shape[0]}")
    return frechet_distance(fit_gaussian(embed(real, embedder)), fit_gaussian(embed(fake, embedder)))


# ===== segmentation =====
def confusion_matrix(pred, gt, num_classes: int) -> np.ndarray:
    p = np.asarray(pred).astype(np.int64).ravel()
    g = np.asarray(gt).astype(np.int64).ravel()
    if p.shape != g.shape:
        raise ValueError(f"prediction and ground truth differ in size: {p.size} vs {g.size}")
    return np.bincount(num_classes * g + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def miou(pred, gt, num_classes: int, classes: Optional[Sequence[int]] = None) -> Tuple[float, np.ndarray]:
    """Mean IoU over classes present in pred or gt (optionally a subset), and the per-class IoU."""
    if isinstance(pred, torch.Tensor):
        pred = pred.cpu().numpy()
    if isinstance(gt, torch.Tensor):
        gt = gt.cpu().numpy()
    cm = confusion_matrix(pred, gt, num_classes)
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - np.diag(cm)
    with np.errstate(divide="ignore", invalid="ignore"):
        per_class = np.where(union > 0, inter / union, np.nan)
    picked = per_class if classes is None else per_class[list(classes)]
    valid = picked[~np.isnan(picked)]
    return (float(valid.mean()) if valid.size else float("nan")), per_class


# ===== object crops =====
@dataclass
class Crop:
    image: torch.Tensor   # (3, s, s)
    label: torch.Tensor   # (s, s)
    cls: int
    pixels: int
    bucket: str


def crop_objects(images: torch.Tensor, labels: torch.Tensor, object_classes: Sequence[int],
                 meta: DatasetMeta, crop_size: int = CROP_SIZE) -> Dict[str, List[Crop]]:
    """Tight-box crops of every connected component of an object class, bucketed by pixel count."""
    buckets: Dict[str, List[Crop]] = {b: [] for b in BUCKETS}
    labs = labels.cpu().numpy()
    for b in range(labs.shape[0]):
        for c in object_classes:
            comps, _ = ndimage.label(labs[b] == c)
            for k, sl in enumerate(ndimage.find_objects(comps), start=1):
                if sl is None:
                    continue
                pixels = int((comps[sl] == k).sum())
                img = images[b, :, sl[0], sl[1]].unsqueeze(0).float()
                lab = labels[b, sl[0], sl[1]][None, None].float()
                size = (crop_size, crop_size)
                crop = Crop(
                    image=F.interpolate(img, size=size, mode="bilinear", align_corners=False)[0],
                    label=F.interpolate(lab, size=size, mode="nearest")[0, 0].long(),
                    cls=int(c), pixels=pixels, bucket=meta.size_bucket(pixels),
                )
                buckets[crop.bucket].append(crop)
    return buckets


def crop_fid(real: List[Crop], fake: List[Crop], embedder: Embedder) -> float:
    if len(real) < 2 or len(fake) < 2:
        return float("nan")
    r = torch.stack([c.image for c in real])
    f = torch.stack([c.image for c in fake])
    return frechet_distance(fit_gaussian(embed(r, embedder)), fit_gaussian(embed(f, embedder)))


def object_fid(real_images: torch.Tensor, fake_images: torch.Tensor, labels: torch.Tensor,
               object_classes: Sequence[int], meta: DatasetMeta, embedder: Embedder) -> Dict[str, float]:
    real_b = crop_objects(real_images, labels, object_classes, meta)
    fake_b = crop_objects(fake_images, labels, object_classes, meta)
    out = {"all": crop_fid(sum(real_b.values(), []), sum(fake_b.values(), []), embedder)}
    for b in BUCKETS:
        out[b] = crop_fid(real_b[b], fake_b[b], embedder)
        if math.isnan(out[b]):
            log.warning("object bucket %r has %d crops; FID undefined", b, len(real_b[b]))
    return out


# ===== generation-based metrics =====
@torch.no_grad()
def generate(generator: Generator, labels: torch.Tensor, seed: int, z_mode: str = "tiled",
             batch_size: int = 16, z: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Images for `labels` with noise drawn from `seed` (or the fixed `z`)."""
    device = next(generator.parameters()).device
    gen = torch.Generator().manual_seed(seed)
    n, r = labels.shape[0], generator.resolution
    if z is None:
        z = sample_noise(mode=z_mode, batch=n, z_dim=generator.z_dim, size=r, generator=gen)
    out = []
    for i in range(0, n, batch_size):
        onehot = one_hot(labels[i:i + batch_size].to(device), generator.num_classes)
        out.append(generator(onehot, z[i:i + batch_size].to(device)).cpu())
    return torch.cat(out)


def multimodal_fid(generator: Generator, labels: torch.Tensor, real: torch.Tensor, embedder: Embedder,
                   seeds: Sequence[int] = (0, 1, 2, 3, 4), z_mode: str = "tiled",
                   z: Optional[torch.Tensor] = None) -> Tuple[float, float, List[float]]:
    if len(seeds) < 2:
        raise ValueError(f"multimodal FID needs >= 2 noise draws, got {len(seeds)}")
    runs = [toy_fid(real, generate(generator, labels, s, z_mode, z=z), embedder) for s in seeds]
    return float(np.mean(runs)), float(np.var(runs, ddof=1)), runs


def resize(images: torch.Tensor, scale: float) -> torch.Tensor:
    if scale == 1:
        return images
    size = int(round(images.shape[-1] * scale))
    if size < 16:
        raise ValueError(f"scale {scale} gives {size}px images; need >= 16")
    return F.interpolate(images, size=(size, size), mode="bilinear", align_corners=False)


def multires_fid(real: torch.Tensor, fake: torch.Tensor, embedder: Embedder,
                 scales: Sequence[float] = (0.5, 1.0, 2.0)) -> Dict[float, float]:
    return {s: toy_fid(resize(real, s), resize(fake, s), embedder) for s in scales}


# ===== report =====
@dataclass
class MetricReport:
    toy_fid: float = float("nan")
    miou: float = float("nan")
    obj_miou: float = float("nan")
    per_class_iou: List[float] = field(default_factory=list)
    obj_fid: Dict[str, float] = field(default_factory=dict)
    fid_mean: float = float("nan")
    fid_var: float = float("nan")
    multires: Dict[float, float] = field(default_factory=dict)

    def flat(self) -> Dict[str, float]:
        row = {"toy_fid": self.toy_fid, "miou": self.miou, "obj_miou": self.obj_miou,
               "fid_mean": self.fid_mean, "fid_var": self.fid_var}
        row.update({f"iou_{c}": v for c, v in enumerate(self.per_class_iou)})
        row.update({f"obj_fid_{b}": v for b, v in self.obj_fid.items()})
        row.update({f"fid_x{s:g}": v for s, v in self.multires.items()})
        return row

    def to_lines(self) -> str:
        return "".join(f"{k}={v:.6g}\n" for k, v in self.flat().items())

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([self.flat()])

    def write(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.txt"), "w", encoding="utf-8") as fh:
            fh.write(self.to_lines())
        self.to_frame().to_csv(os.path.join(out_dir, "metrics.csv"), index=False)


def evaluate(generator: Generator, labels: torch.Tensor, real: torch.Tensor, segmenter, meta: DatasetMeta,
             object_classes: Optional[Sequence[int]] = None, seeds: Sequence[int] = (0, 1, 2, 3, 4),
             scales: Sequence[float] = (0.5, 1.0, 2.0), z_mode: str = "tiled") -> MetricReport:
    """Full report for `generator` on paired (labels, real) scenes."""
    generator.eval()
    object_classes = list(object_classes) if object_classes is not None else list(range(1, meta.num_classes))
    embedder = segmenter.embed
    fake = generate(generator, labels, seeds[0] if seeds else 0, z_mode)

    report = MetricReport()
    report.toy_fid = toy_fid(real, fake, embedder)
    pred = torch.cat([segmenter.predict(fake[i:i + 64]) for i in range(0, fake.shape[0], 64)])
    report.miou, per_class = miou(pred, labels, meta.num_classes)
    report.obj_miou, _ = miou(pred, labels, meta.num_classes, classes=object_classes)
    report.per_class_iou = per_class.tolist()
    report.obj_fid = object_fid(real, fake, labels, object_classes, meta, embedder)
    if len(seeds) >= 2:
        report.fid_mean, report.fid_var, _ = multimodal_fid(generator, labels, real, embedder, seeds, z_mode)
    usable = [s for s in scales if s == 1 or real.shape[-1] * s >= 16]
    if len(usable) < len(scales):
        log.warning("skipping scales %s below 16px", sorted(set(scales) - set(usable)))
    report.multires = multires_fid(real, fake, embedder, usable)
    log.info("toy_fid=%.3f miou=%.3f obj_miou=%.3f", report.toy_fid, report.miou, report.obj_miou)
    return report
