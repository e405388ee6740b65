# variants.py
# Ablation variants: each key names a set of TrainConfig overrides.
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List

from config import ConfigError, TrainConfig


@dataclass(frozen=True)
class Variant:
    key: str
    label: str
    overrides: Dict[str, object] = field(default_factory=dict)

    def apply(self, cfg: TrainConfig) -> TrainConfig:
        return replace(cfg, **self.overrides).validate()


# Canonical catalog (add here)
_REGISTRY: Dict[str, Variant] = {v.key: v for v in (
    Variant("dp-dp", "DP generator, DP discriminator", {"gen": "dp", "dis": "dp"}),
    Variant("dp-oa", "DP generator, pixel-only discriminator", {"gen": "dp", "dis": "oa"}),
    Variant("oa-dp", "single-pyramid generator, DP discriminator", {"gen": "oa", "dis": "dp"}),
    Variant("oa-oa", "single-pyramid generator, pixel-only discriminator", {"gen": "oa", "dis": "oa"}),
    Variant("ms-enc", "patch loss on encoder taps", {"ms_placement": "enc"}),
    Variant("ms-dec", "patch loss on decoder taps", {"ms_placement": "dec"}),
    Variant("ms-both", "patch loss on encoder and decoder taps", {"ms_placement": "both"}),
    Variant("ms-off", "no patch loss", {"ms_placement": "off"}),
    Variant("fm-enc", "feature matching on encoder taps", {"fm_placement": "enc"}),
    Variant("fm-dec", "feature matching on decoder taps", {"fm_placement": "dec"}),
    Variant("fm-both", "feature matching on encoder and decoder taps", {"fm_placement": "both"}),
    Variant("fm-off", "no feature matching", {"fm_placement": "off"}),
    Variant("no-cat", "no concatenation of the bottom alpha", {"no_cat": True}),
    Variant("no-lm", "no LabelMix regularization", {"no_lm": True}),
)}

BASELINE = "dp-dp"


def keys() -> List[str]:
    return list(_REGISTRY)


def resolve(key: str) -> Variant:
    k = (key or "").strip().lower()
    if k not in _REGISTRY:
        raise ConfigError(f"unknown variant {key!r}; choose from {', '.join(_REGISTRY)}")
    return _REGISTRY[k]


def plan(requested: Iterable[str]) -> List[Variant]:
    """Resolve requested keys (deduplicated, order kept) with the baseline first."""
    out = [resolve(BASELINE)]
    for key in requested:
        v = resolve(key)
        if v not in out:
            out.append(v)
    return out
