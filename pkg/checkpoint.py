# checkpoint.py
"""
DPGK tensor container.

Layout (little-endian):
    b"DPGK" | version u32 | count u32
    per tensor: name_len u16 | name utf-8 | rank u8 | dims u32 * rank | dtype u8 | raw data
    crc32 u32 over every preceding byte
"""

from __future__ import annotations
import logging
import os
import struct
import zlib
from collections import OrderedDict
from typing import Dict, Mapping

import numpy as np
import torch

log = logging.getLogger(__name__)

MAGIC = b"DPGK"
VERSION = 1

# tag -> (torch dtype, numpy little-endian dtype)
DTYPES = {
    0: (torch.float32, np.dtype("<f4")),
    1: (torch.float64, np.dtype("<f8")),
    2: (torch.int64, np.dtype("<i8")),
    3: (torch.uint8, np.dtype("u1")),
}
_TAGS = {td: tag for tag, (td, _) in DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


def text_tensor(text: str) -> torch.Tensor:
    return torch.tensor(list(text.encode("utf-8")), dtype=torch.uint8)


def tensor_text(t: torch.Tensor) -> str:
    return bytes(t.cpu().numpy().tobytes()).decode("utf-8")


def encode(tensors: Mapping[str, torch.Tensor]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, t in tensors.items():
        if not isinstance(t, torch.Tensor):
            raise CheckpointError(f"{name}: expected a tensor, got {type(t).__name__}")
        if t.dtype not in _TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or t.dim() > 0xFF:
            raise CheckpointError(f"{name}: name or rank too large")
        tag = _TAGS[t.dtype]
        arr = t.detach().cpu().contiguous().numpy().astype(DTYPES[tag][1], copy=False)
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", t.dim()))
        parts.append(struct.pack(f"<{t.dim()}I", *t.shape))
        parts.append(struct.pack("<B", tag))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> "OrderedDict[str, torch.Tensor]":
    if len(data) < 16:
        raise CheckpointError(f"truncated checkpoint ({len(data)} bytes)")
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    version, count = struct.unpack("<II", body[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checksum mismatch (corrupt or truncated checkpoint)")

    r = _Reader(body)
    r.pos = 12
    out: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for _ in range(count):
        (n,) = r.unpack("<H", "name length")
        name = r.take(n, "name").decode("utf-8")
        (rank,) = r.unpack("<B", f"{name} rank")
        dims = r.unpack(f"<{rank}I", f"{name} dims")
        (tag,) = r.unpack("<B", f"{name} dtype")
        if tag not in DTYPES:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        tdtype, ndtype = DTYPES[tag]
        numel = int(np.prod(dims)) if dims else 1
        raw = r.take(numel * ndtype.itemsize, f"{name} data")
        arr = np.frombuffer(raw, dtype=ndtype, count=numel).reshape(dims).copy()
        out[name] = torch.from_numpy(arr).to(tdtype)
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes after {count} tensors")
    return out


def write(path: str, tensors: Mapping[str, torch.Tensor]) -> int:
    data = encode(tensors)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    log.info("wrote %s (%d tensors, %d bytes)", path, len(tensors), len(data))
    return len(data)


def read(path: str) -> Dict[str, torch.Tensor]:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        return decode(fh.read())


def load_module_state(module: torch.nn.Module, tensors: Mapping[str, torch.Tensor], prefix: str) -> None:
    """Copy `prefix`-named tensors into `module`, naming the first tensor that disagrees."""
    current = module.state_dict()
    incoming = OrderedDict()
    for key, ref in current.items():
        name = prefix + key
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name}")
        t = tensors[name]
        if tuple(t.shape) != tuple(ref.shape):
            raise CheckpointError(f"tensor {name}: checkpoint shape {tuple(t.shape)} != model shape {tuple(ref.shape)}")
        incoming[key] = t.to(ref.dtype)
    extra = [n for n in tensors if n.startswith(prefix) and n[len(prefix):] not in current]
    if extra:
        raise CheckpointError(f"checkpoint tensor {extra[0]} has no counterpart in the model")
    incoming._metadata = getattr(current, "_metadata", None)
    module.load_state_dict(incoming)
