# networks/segmenter.py
"""Small frozen segmenter used for mIoU, with its pooled penultimate features as the FID embedder."""

from __future__ import annotations
import io
import logging
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from dotenv import dotenv_values
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

import checkpoint
from networks.blocks import ConvBlock, conv2d, upsample_nearest

log = logging.getLogger(__name__)

EMBED_DIM = 64


class ToySegmenter(nn.Module):
    def __init__(self, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.enc_0 = ConvBlock(3, 32)
        self.enc_1 = ConvBlock(32, 64, stride=2)
        self.enc_2 = ConvBlock(64, 64, stride=2)
        self.dec_1 = ConvBlock(64 + 64, 64)
        self.dec_0 = ConvBlock(64 + 32, EMBED_DIM)
        self.head = conv2d(EMBED_DIM, num_classes, 1)

    def features(self, image: torch.Tensor) -> torch.Tensor:
        e0 = self.enc_0(image)
        e1 = self.enc_1(e0)
        e2 = self.enc_2(e1)
        d1 = self.dec_1(torch.cat([upsample_nearest(e2, 2), e1], dim=1))
        return self.dec_0(torch.cat([upsample_nearest(d1, 2), e0], dim=1))

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(image))

    def embed(self, image: torch.Tensor) -> torch.Tensor:
        """(B,3,H,W) -> (B, 64) average-pooled penultimate features."""
        return self.features(image).mean(dim=(2, 3))

    @torch.no_grad()
    def predict(self, image: torch.Tensor) -> torch.Tensor:
        return self(image).argmax(dim=1)


def freeze(model: ToySegmenter) -> ToySegmenter:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def train_segmenter(dataset: Dataset, num_classes: int, epochs: int = 10, batch_size: int = 16,
                    lr: float = 1e-3, seed: int = 0, device: str = "cpu",
                    progress: bool = False) -> ToySegmenter:
    torch.manual_seed(seed)
    model = ToySegmenter(num_classes).to(device)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=True, drop_last=len(dataset) > batch_size,
                        generator=torch.Generator().manual_seed(seed))
    model.train()
    for epoch in range(epochs):
        total, batches = 0.0, 0
        for label, image in tqdm(loader, desc=f"segmenter epoch {epoch + 1}", disable=not progress):
            label, image = label.to(device), image.to(device)
            loss = F.cross_entropy(model(image), label)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss)
            batches += 1
        log.info("segmenter epoch %d/%d: ce=%.4f", epoch + 1, epochs, total / max(batches, 1))
    return freeze(model)


def save_segmenter(model: ToySegmenter, path: str) -> None:
    tensors = {f"S.{k}": v for k, v in model.state_dict().items()}
    tensors["meta.config"] = checkpoint.text_tensor(f"num_classes={model.num_classes}\n")
    checkpoint.write(path, tensors)


def load_segmenter(path: str, num_classes: Optional[int] = None, device: str = "cpu") -> ToySegmenter:
    tensors = checkpoint.read(path)
    if "meta.config" not in tensors:
        raise checkpoint.CheckpointError(f"{path}: missing meta.config")
    meta = dotenv_values(stream=io.StringIO(checkpoint.tensor_text(tensors.pop("meta.config"))))
    stored = int(meta.get("num_classes") or 0)
    if num_classes is not None and stored != num_classes:
        raise checkpoint.CheckpointError(f"{path}: segmenter trained for {stored} classes, need {num_classes}")
    model = ToySegmenter(stored)
    checkpoint.load_module_state(model, tensors, "S.")
    return freeze(model.to(device))
