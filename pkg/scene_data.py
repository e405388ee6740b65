"""
Procedural multi-scale scenes: paired label maps and rendered images.

- generate_scene() is a pure function of (spec.seed, index): class-consistent
  geometric primitives over a shaded background, object areas spread over
  more than two orders of magnitude.
- On disk a dataset is meta.txt + labels/%06d.png + images/%06d.png.
- one_hot() / class_frequencies() produce the per-pixel indicator and the
  inverse class-frequency weights used by the pixel loss.
"""

from __future__ import annotations
import logging
import math
import os
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Optional, Tuple

import numpy as np
import torch
from dotenv import dotenv_values
from PIL import Image
from torch.utils.data import Dataset

log = logging.getLogger(__name__)


class SceneDataError(ValueError):
    pass


# ===== Metadata =====
CLASS_NAMES = (
    "background", "crate", "pond", "roof", "lawn", "tile", "puddle", "sign",
    "hedge", "window", "rock", "banner", "tank", "mat", "lamp", "door",
)

# RGB 0..255, indexed by class id (0 = background, never painted)
PALETTE = (
    (0, 0, 0), (200, 60, 50), (40, 110, 210), (230, 190, 40), (60, 170, 70),
    (170, 70, 190), (40, 200, 200), (240, 130, 30), (120, 80, 40),
    (220, 220, 230), (90, 90, 90), (250, 100, 160), (20, 60, 40),
    (150, 200, 110), (255, 240, 150), (70, 40, 120),
)


def class_name(c: int) -> str:
    return CLASS_NAMES[c] if c < len(CLASS_NAMES) else f"class_{c}"


def class_color(c: int) -> np.ndarray:
    if c < len(PALETTE):
        rgb = PALETTE[c]
    else:
        rgb = ((c * 97) % 256, (c * 57 + 80) % 256, (c * 151 + 30) % 256)
    return np.asarray(rgb, dtype=np.float32) / 127.5 - 1.0


@dataclass(frozen=True)
class DatasetMeta:
    num_classes: int
    height: int
    width: int
    class_names: Tuple[str, ...]
    small_max: int
    large_min: int

    def validate(self) -> "DatasetMeta":
        if self.num_classes < 2:
            raise SceneDataError(f"num_classes must be >= 2 (background + objects), got {self.num_classes}")
        for name, v in (("height", self.height), ("width", self.width)):
            if v < 16 or v & (v - 1):
                raise SceneDataError(f"{name} must be a power of two >= 16, got {v}")
        if len(self.class_names) != self.num_classes:
            raise SceneDataError(f"{len(self.class_names)} class names for {self.num_classes} classes")
        if not self.small_max < self.large_min:
            raise SceneDataError(f"small_max ({self.small_max}) must be < large_min ({self.large_min})")
        return self

    @property
    def resolution(self) -> Tuple[int, int]:
        return (self.height, self.width)

    def size_bucket(self, pixel_count: int) -> str:
        if pixel_count > self.large_min:
            return "large"
        if pixel_count < self.small_max:
            return "small"
        return "medium"


def default_meta(resolution: int = 64, num_classes: int = 8) -> DatasetMeta:
    # object-size buckets of the 256-pixel protocol, scaled by area
    scale = (resolution / 256.0) ** 2
    return DatasetMeta(
        num_classes=num_classes,
        height=resolution,
        width=resolution,
        class_names=tuple(class_name(c) for c in range(num_classes)),
        small_max=int(round(2500 * scale)),
        large_min=int(round(10000 * scale)),
    ).validate()


# ===== Scene generation =====
@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    resolution: int = 64
    num_classes: int = 8
    object_count_range: Tuple[int, int] = (2, 8)
    object_classes: Tuple[int, ...] = ()
    scale_distribution: Tuple[float, float] = (0.001, 0.25)  # log-uniform area fraction
    background_level: float = -0.2
    background_contrast: float = 0.35
    background_noise: float = 0.03

    def classes(self) -> Tuple[int, ...]:
        return self.object_classes or tuple(range(1, self.num_classes))

    def validate(self, meta: Optional[DatasetMeta] = None) -> "SceneSpec":
        if not self.classes():
            raise SceneDataError("empty object class list")
        bad = [c for c in self.classes() if not 0 < c < self.num_classes]
        if bad:
            raise SceneDataError(f"object classes {bad} outside 1..{self.num_classes - 1}")
        lo, hi = self.object_count_range
        if lo < 0 or hi < lo:
            raise SceneDataError(f"invalid object_count_range {self.object_count_range}")
        fmin, fmax = self.scale_distribution
        if not (0.0 < fmin <= fmax <= 1.0):
            raise SceneDataError(f"scale_distribution must satisfy 0 < min <= max <= 1, got {self.scale_distribution}")
        r = self.resolution
        if r < 16 or r & (r - 1):
            raise SceneDataError(f"resolution must be a power of two >= 16, got {r}")
        if meta is not None:
            area = float(meta.height * meta.width)
            if fmin * area >= meta.small_max or fmax * area <= meta.large_min:
                raise SceneDataError(
                    f"scale_distribution {self.scale_distribution} does not reach both the small "
                    f"(< {meta.small_max} px) and large (> {meta.large_min} px) buckets"
                )
        return self


def default_spec(meta: DatasetMeta, seed: int = 0) -> SceneSpec:
    return SceneSpec(seed=seed, resolution=meta.height, num_classes=meta.num_classes).validate(meta)


def _background(rng: np.random.Generator, spec: SceneSpec, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    r = spec.resolution
    angle = rng.uniform(0.0, 2.0 * math.pi)
    ramp = (math.cos(angle) * xx + math.sin(angle) * yy) / r
    level = spec.background_level + spec.background_contrast * ramp
    tint = np.asarray([0.9, 1.0, 1.1], dtype=np.float32)[:, None, None]
    return (level[None] * tint).astype(np.float32)


def _primitive_mask(cls: int, area: float, aspect: float, u: float, v: float,
                    yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    h_img, w_img = yy.shape
    if cls % 2:
        w = int(np.clip(round(math.sqrt(area * aspect)), 1, w_img))
        h = int(np.clip(round(area / w), 1, h_img))
        x0 = int(u * (w_img - w + 1))
        y0 = int(v * (h_img - h + 1))
        return (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
    a = min(max(math.sqrt(area * aspect / math.pi), 1.0), w_img / 2.0)
    b = min(max(math.sqrt(area / (aspect * math.pi)), 1.0), h_img / 2.0)
    cx = a + u * (w_img - 2.0 * a)
    cy = b + v * (h_img - 2.0 * b)
    return ((xx + 0.5 - cx) / a) ** 2 + ((yy + 0.5 - cy) / b) ** 2 <= 1.0


def _texture(cls: int, gain: float, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    period = 3.0 + 2.0 * (cls % 4)
    coord = xx if cls % 2 else yy
    stripes = 0.12 * np.sign(np.sin(2.0 * math.pi * coord / period))
    shade = 0.15 * ((xx + yy) / float(xx.shape[1] + yy.shape[0]) - 0.5)
    return class_color(cls)[:, None, None] * gain + (stripes + shade)[None]


def generate_scene(spec: SceneSpec, index: int) -> Tuple[np.ndarray, np.ndarray]:
    """Render scene `index`: (label uint8 HxW, image float32 3xHxW in [-1, 1])."""
    spec.validate()
    if index < 0:
        raise SceneDataError(f"scene index must be >= 0, got {index}")
    r = spec.resolution
    rng = np.random.default_rng([spec.seed, index])
    yy, xx = np.mgrid[0:r, 0:r].astype(np.float32)

    background = _background(rng, spec, yy, xx)
    image = background.copy()
    label = np.zeros((r, r), dtype=np.uint8)

    lo, hi = spec.object_count_range
    count = int(rng.integers(lo, hi + 1))
    classes = spec.classes()
    fmin, fmax = spec.scale_distribution
    objects = []
    for _ in range(count):
        cls = int(classes[int(rng.integers(len(classes)))])
        frac = math.exp(rng.uniform(math.log(fmin), math.log(fmax)))
        objects.append((frac, cls, rng.uniform(0.67, 1.5), rng.random(), rng.random(), rng.uniform(0.85, 1.15)))

    # largest first, so small objects stay on top
    objects.sort(key=lambda o: -o[0])
    for frac, cls, aspect, u, v, gain in objects:
        mask = _primitive_mask(cls, frac * r * r, aspect, u, v, yy, xx)
        label[mask] = cls
        image[:, mask] = _texture(cls, gain, yy, xx)[:, mask]

    if not (label == 0).any():
        # a label map always keeps one background pixel
        label[0, 0] = 0
        image[:, 0, 0] = background[:, 0, 0]

    image += rng.normal(0.0, spec.background_noise, size=image.shape).astype(np.float32)
    return label, np.clip(image, -1.0, 1.0).astype(np.float32)


# ===== Encodings and statistics =====
def _as_long(label) -> torch.Tensor:
    if isinstance(label, torch.Tensor):
        return label.long()
    return torch.as_tensor(np.asarray(label), dtype=torch.long)


def _check_range(label: torch.Tensor, num_classes: int) -> None:
    bad = (label < 0) | (label >= num_classes)
    if bad.any():
        pos = tuple(int(i) for i in bad.nonzero()[0].tolist())
        raise SceneDataError(f"class id {int(label[pos])} at pixel {pos} is outside 0..{num_classes - 1}")


def one_hot(label, num_classes: int) -> torch.Tensor:
    """(H,W) -> (N,H,W) or (B,H,W) -> (B,N,H,W) float indicator."""
    lab = _as_long(label)
    _check_range(lab, num_classes)
    out = torch.nn.functional.one_hot(lab, num_classes)
    return out.movedim(-1, -3).float()


@dataclass
class ClassWeights:
    alpha: torch.Tensor          # (N,) float64
    present_mask: torch.Tensor   # (N,) bool


def _as_batch(labels) -> torch.Tensor:
    if isinstance(labels, torch.Tensor):
        return labels.long() if labels.dim() == 3 else labels.long().unsqueeze(0)
    maps = [_as_long(m) for m in labels]
    if not maps:
        raise SceneDataError("class_frequencies needs a non-empty batch")
    return torch.stack(maps)


def class_frequencies(labels, num_classes: int) -> ClassWeights:
    """alpha[c] = mean over the maps containing c of H*W / count_c(map)."""
    maps = _as_batch(labels)
    if maps.shape[0] == 0:
        raise SceneDataError("class_frequencies needs a non-empty batch")
    _check_range(maps, num_classes)
    hw = maps.shape[-2] * maps.shape[-1]
    counts = torch.stack([torch.bincount(m.flatten(), minlength=num_classes) for m in maps]).to(torch.float64)
    present = counts > 0
    inv = torch.where(present, hw / counts.clamp_min(1.0), torch.zeros_like(counts))
    n_maps = present.sum(0)
    alpha = inv.sum(0) / n_maps.clamp_min(1).to(torch.float64)
    return ClassWeights(alpha=alpha, present_mask=n_maps > 0)


def dataset_class_weights(dataset: Dataset, num_classes: int) -> ClassWeights:
    labels = torch.stack([dataset[i][0] for i in range(len(dataset))])
    return class_frequencies(labels, num_classes)


# ===== On-disk format =====
META_FILE = "meta.txt"


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    """(3,H,W) in [-1,1] -> (H,W,3) uint8."""
    arr = np.clip((np.asarray(image, dtype=np.float32) + 1.0) * 127.5, 0.0, 255.0)
    return np.rint(arr).astype(np.uint8).transpose(1, 2, 0)


def uint8_to_image(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def write_meta(path: str, meta: DatasetMeta) -> None:
    lines = [
        f"num_classes={meta.num_classes}",
        f"height={meta.height}",
        f"width={meta.width}",
        *(f"class_{i}={n}" for i, n in enumerate(meta.class_names)),
        f"small_max={meta.small_max}",
        f"large_min={meta.large_min}",
    ]
    with open(os.path.join(path, META_FILE), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_meta(path: str) -> DatasetMeta:
    meta_path = os.path.join(path, META_FILE)
    if not os.path.isfile(meta_path):
        raise SceneDataError(f"missing {META_FILE} in {path}")
    kv = dotenv_values(meta_path)
    try:
        n = int(kv["num_classes"])
        names = tuple(kv[f"class_{i}"] for i in range(n))
        meta = DatasetMeta(
            num_classes=n,
            height=int(kv["height"]),
            width=int(kv["width"]),
            class_names=names,
            small_max=int(kv["small_max"]),
            large_min=int(kv["large_min"]),
        )
    except KeyError as e:
        raise SceneDataError(f"{meta_path}: missing key {e.args[0]}") from None
    except (TypeError, ValueError) as e:
        raise SceneDataError(f"{meta_path}: {e}") from None
    return meta.validate()


def save_dataset(path: str, meta: DatasetMeta, scenes: Iterable[Tuple[np.ndarray, np.ndarray]]) -> int:
    meta.validate()
    os.makedirs(os.path.join(path, "labels"), exist_ok=True)
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    write_meta(path, meta)
    n = 0
    for i, (label, image) in enumerate(scenes):
        label = np.asarray(label)
        image = np.asarray(image)
        if label.shape != meta.resolution:
            raise SceneDataError(f"scene {i}: label shape {label.shape} != {meta.resolution}")
        _check_range(_as_long(label), meta.num_classes)
        Image.fromarray(label.astype(np.uint8)).save(os.path.join(path, "labels", f"{i:06d}.png"))
        Image.fromarray(image_to_uint8(image)).save(os.path.join(path, "images", f"{i:06d}.png"))
        n += 1
    log.info("saved %d scenes to %s", n, path)
    return n


def _stems(folder: str) -> List[str]:
    if not os.path.isdir(folder):
        return []
    return sorted(os.path.splitext(f)[0] for f in os.listdir(folder) if f.endswith(".png"))


def read_scene(path: str, stem: str, meta: DatasetMeta) -> Tuple[np.ndarray, np.ndarray]:
    label_file = os.path.join(path, "labels", f"{stem}.png")
    with Image.open(label_file) as im:
        label = np.asarray(im, dtype=np.uint8)
    if label.ndim != 2:
        raise SceneDataError(f"{label_file}: expected a single-channel PNG, got mode shape {label.shape}")
    if label.shape != meta.resolution:
        raise SceneDataError(f"{label_file}: shape {label.shape} != {meta.resolution}")
    top = int(label.max())
    if top >= meta.num_classes:
        raise SceneDataError(f"{label_file}: label value {top} >= num_classes {meta.num_classes}")
    with Image.open(os.path.join(path, "images", f"{stem}.png")) as im:
        image = uint8_to_image(np.asarray(im.convert("RGB"), dtype=np.uint8))
    return label, image


def list_scenes(path: str) -> List[str]:
    labels = _stems(os.path.join(path, "labels"))
    images = _stems(os.path.join(path, "images"))
    if labels != images:
        only_l = sorted(set(labels) - set(images))
        only_i = sorted(set(images) - set(labels))
        raise SceneDataError(
            f"{path}: label/image name mismatch (labels only: {only_l[:5]}, images only: {only_i[:5]})"
        )
    return labels


def load_dataset(path: str) -> Tuple[DatasetMeta, Iterator[Tuple[np.ndarray, np.ndarray]]]:
    meta = read_meta(path)
    stems = list_scenes(path)

    def _iter():
        for stem in stems:
            yield read_scene(path, stem, meta)

    return meta, _iter()


# ===== torch datasets =====
def _to_tensors(label: np.ndarray, image: np.ndarray) -> Tuple[torch.Tensor, torch.Tensor]:
    return torch.from_numpy(label.astype(np.int64)), torch.from_numpy(np.ascontiguousarray(image))


class ProceduralScenes(Dataset):
    """Scenes rendered on demand; safe to share across DataLoader workers."""

    def __init__(self, spec: SceneSpec, count: int, offset: int = 0):
        self.spec = spec.validate()
        self.count = count
        self.offset = offset

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int):
        return _to_tensors(*generate_scene(self.spec, self.offset + i))


class SceneFolder(Dataset):
    def __init__(self, path: str):
        self.path = path
        self.meta = read_meta(path)
        self.stems = list_scenes(path)

    def __len__(self) -> int:
        return len(self.stems)

    def __getitem__(self, i: int):
        return _to_tensors(*read_scene(self.path, self.stems[i], self.meta))
