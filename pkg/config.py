# config.py
import os
from dataclasses import dataclass, fields, asdict, replace
from typing import Dict, Optional

from dotenv import load_dotenv, dotenv_values

load_dotenv()


class ConfigError(ValueError):
    pass


def env_any(*names, default=None, required=False):
    for n in names:
        v = os.getenv(n)
        if v:
            return v
    if required and default is None:
        raise ConfigError(f"Missing required env: one of {names}")
    return default


# Canonical keys (accept common variants)
DEVICE         = env_any("DPGAN_DEVICE", "DEVICE", default="cpu")
LOG_LEVEL      = env_any("DPGAN_LOG_LEVEL", "LOG_LEVEL", default="INFO")
DATA_ROOT      = env_any("DPGAN_DATA", "DATA_DIR", default="data/toy")
SEGMENTER_PATH = env_any("DPGAN_SEGMENTER", "SEGMENTER_PATH", default="fixtures/segmenter.dpgk")

GEN_VARIANTS = ("dp", "oa")
DIS_VARIANTS = ("dp", "oa")
PLACEMENTS = ("enc", "dec", "both", "off")
Z_MODES = ("tiled", "per_pixel")
MASK_MODES = ("component", "class")
WEIGHT_MODES = ("batch", "dataset")
REDUCTIONS = ("mean", "sum")


@dataclass
class TrainConfig:
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    beta1: float = 0.0
    beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_decay: float = 0.9999
    lambda_lm: float = 5.0
    batch_size: int = 4
    steps: int = 2000
    seed: int = 0
    resolution: int = 64
    num_classes: int = 8
    width_divisor: int = 8
    z_dim: int = 64
    # variant axes
    gen: str = "dp"
    dis: str = "dp"
    ms_placement: str = "enc"
    fm_placement: str = "dec"
    no_cat: bool = False
    no_lm: bool = False
    z_mode: str = "tiled"
    # toggles the method leaves open
    spectral_norm_d: bool = True
    spectral_norm_g: bool = False
    nonsat_g_hinge: bool = False
    mask_mode: str = "component"
    class_weights: str = "batch"
    route_top_alpha: bool = False
    lm_reduction: str = "mean"  # lambda_lm scales the per-element mean; "sum" is sum of squares per sample, batch mean
    deterministic: bool = True
    num_workers: int = 0

    @property
    def use_labelmix(self) -> bool:
        return not self.no_lm and self.lambda_lm > 0

    @property
    def effective_ms(self) -> str:
        # the legacy discriminator is supervised per pixel only
        return "off" if self.dis == "oa" else self.ms_placement

    @property
    def effective_fm(self) -> str:
        return "off" if self.dis == "oa" else self.fm_placement

    def validate(self) -> "TrainConfig":
        for key in ("lr_g", "lr_d", "adam_eps"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be > 0, got {getattr(self, key)}")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"adam betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.lambda_lm < 0:
            raise ConfigError(f"lambda_lm must be >= 0, got {self.lambda_lm}")
        for key in ("batch_size", "width_divisor", "z_dim"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        r = self.resolution
        if r < 16 or r & (r - 1):
            raise ConfigError(f"resolution must be a power of two >= 16, got {r}")
        enums = {
            "gen": GEN_VARIANTS, "dis": DIS_VARIANTS,
            "ms_placement": PLACEMENTS, "fm_placement": PLACEMENTS,
            "z_mode": Z_MODES, "mask_mode": MASK_MODES,
            "class_weights": WEIGHT_MODES, "lm_reduction": REDUCTIONS,
        }
        for key, allowed in enums.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        return self


@dataclass
class RunConfig(TrainConfig):
    data: str = DATA_ROOT
    out: str = "runs/default"
    segmenter: str = SEGMENTER_PATH
    eval_every: int = 0
    eval_count: int = 100
    grid_every: int = 500
    grid_size: int = 4
    log_every: int = 50
    ckpt_every: int = 500

    def train_config(self) -> TrainConfig:
        keys = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in keys})


# ===== key=value files =====
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, raw: str, kind):
    if kind is bool or kind == "bool":
        s = raw.strip().lower()
        if s in _TRUE:
            return True
        if s in _FALSE:
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw


def field_types(cls=RunConfig) -> Dict[str, object]:
    return {f.name: f.type for f in fields(cls)}


def apply_overrides(cfg, values: Dict[str, Optional[str]], strict: bool = True):
    """Return a copy of `cfg` with string `values` coerced onto its fields."""
    types = field_types(type(cfg))
    updates = {}
    for key, raw in values.items():
        if raw is None:
            continue
        if key not in types:
            if strict:
                raise ConfigError(f"unknown config key {key!r}")
            continue
        updates[key] = _coerce(key, str(raw), types[key])
    return replace(cfg, **updates)


def load_config(path: str, base=None):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    return apply_overrides(base or RunConfig(), dotenv_values(path))


def dump_config(cfg) -> str:
    lines = []
    for k, v in asdict(cfg).items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def write_config(cfg, path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
