"""Engine configuration and validation."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

# COCO per-keypoint falloff constants (nose, eyes, ears, shoulders, elbows,
# wrists, hips, knees, ankles), used directly when K = 17.
COCO_KAPPAS = (
    0.026, 0.025, 0.025, 0.035, 0.035,
    0.079, 0.079, 0.072, 0.072, 0.062, 0.062,
    0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
)

# 15-joint skeleton (nose, head bottom, head top, then shoulders..ankles).
# The two head points reuse the COCO ear constant, the rest map one-to-one.
HEAD15_KAPPAS = (
    0.026, 0.035, 0.035,
    0.079, 0.079, 0.072, 0.072, 0.062, 0.062,
    0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
)

UNIFORM_KAPPA = 0.07


def default_kappas(keypoint_count: int) -> Tuple[float, ...]:
    """Per-keypoint OKS constants for a skeleton of the given size."""
    if keypoint_count == 17:
        return COCO_KAPPAS
    if keypoint_count == 15:
        return HEAD15_KAPPAS
    return (UNIFORM_KAPPA,) * keypoint_count


@dataclass(frozen=True)
class EngineConfig:
    """All tunables of the association engine in one place."""

    d: int = 256                      # embedding width
    d_e: int = -1                     # edge embedding width; -1 means "same as d"
    keypoint_count: int = 15
    n_encoder_stages: int = 2
    n_decoder_stages: int = 2
    alpha: float = 0.3                # appearance/pose blend weight
    tau_dup: float = 0.4              # duplicate suppression threshold
    tau_age: int = 60                 # frames a track may go unmatched
    ffn_hidden: int = 1024
    heatmap_kernel_width: float = 10.0  # Gaussian std in px for rendered heatmaps
    oks_kappas: Tuple[float, ...] = ()  # empty means "derive from keypoint_count"
    warp_mode: str = "identity"       # "identity" or "pluggable"
    edge_update_mode: str = "features"  # "features" (pre-softmax) or "weights"
    crop_height: int = 64
    crop_width: int = 32

    def __post_init__(self):
        if self.d_e == -1:
            object.__setattr__(self, "d_e", self.d)
        if not self.oks_kappas:
            object.__setattr__(self, "oks_kappas", default_kappas(self.keypoint_count))
        else:
            object.__setattr__(self, "oks_kappas", tuple(float(k) for k in self.oks_kappas))

    def with_overrides(self, **kwargs) -> "EngineConfig":
        return validate_config(replace(self, **kwargs))


def validate_config(cfg: EngineConfig) -> EngineConfig:
    """Return cfg unchanged if every invariant holds; raise on the first violation."""
    if not (0.0 <= cfg.alpha <= 1.0):
        raise ValueError("alpha out of range")
    if cfg.d <= 0:
        raise ValueError("embedding dim must be positive")
    if cfg.d_e <= 0:
        raise ValueError("edge embedding dim must be positive")
    if cfg.keypoint_count <= 0:
        raise ValueError("keypoint count must be positive")
    if cfg.n_encoder_stages <= 0:
        raise ValueError("encoder stage count must be positive")
    if cfg.n_decoder_stages <= 0:
        raise ValueError("decoder stage count must be positive")
    if cfg.ffn_hidden <= 0:
        raise ValueError("ffn hidden dim must be positive")
    if not (0.0 <= cfg.tau_dup <= 1.0):
        raise ValueError("tau_dup out of range")
    if cfg.tau_age < 0:
        raise ValueError("tau_age must be non-negative")
    if cfg.heatmap_kernel_width <= 0:
        raise ValueError("heatmap kernel width must be positive")
    if len(cfg.oks_kappas) != cfg.keypoint_count:
        raise ValueError("kappa count must match keypoint count")
    if any(k <= 0 for k in cfg.oks_kappas):
        raise ValueError("kappas must be strictly positive")
    if cfg.warp_mode not in ("identity", "pluggable"):
        raise ValueError("warp mode must be identity or pluggable")
    if cfg.edge_update_mode not in ("features", "weights"):
        raise ValueError("edge update mode must be features or weights")
    if cfg.crop_height <= 0 or cfg.crop_width <= 0:
        raise ValueError("crop dims must be positive")
    if cfg.crop_height % 8 or cfg.crop_width % 8:
        # three 2x2 pooling stages in the toy backbone
        raise ValueError("crop dims must be divisible by 8")
    return cfg


def kappa_array(cfg: EngineConfig) -> np.ndarray:
    return np.asarray(cfg.oks_kappas, dtype=np.float64)
