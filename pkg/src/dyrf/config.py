"""Resolved run configuration."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional


@dataclass
class StyleConfig:
    # loss weights
    lambda_content: float = 5e-3
    lambda_tv: float = 5e-2
    lambda_feat: float = 1.0
    lambda_coarse: float = 1.0
    lambda_color: float = 5.0
    lambda_fine: float = 10.0

    # field
    spatial_res: int = 24
    density_rank: int = 8
    app_rank: int = 8
    app_dim: int = 24
    density_bias: float = -10.0

    # rendering
    n_samples: int = 96
    weight_threshold: float = 1e-4
    patch: int = 32

    # photoreal training
    pretrain_steps: int = 5000
    pretrain_batch: int = 2048
    pretrain_samples: int = 32
    pretrain_lr_grid: float = 2e-2
    finetune_steps: int = 200
    holdout_fraction: float = 0.05

    # optimizer
    lr_grid: float = 1e-2
    lr_decoder: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8

    # stylization
    n_keyframes: int = 4
    reference_frame: int = 0
    reference_camera: int = 0
    theta_deg: float = 30.0
    voxel_res: int = 64
    bucket_cap: int = 8
    alpha_min: float = 0.5
    keyframe_steps: int = 600
    full_steps: int = 600
    fine_batch: int = 1024

    # pseudo-reference propagation
    patch_size: int = 5
    window: int = 21
    pyramid_levels: int = 3

    seed: int = 0
    # CNNW1 weight file for the feature extractor; empty selects the seeded built-in one
    extractor: str = ""

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith("lambda_") and getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")
        for name in ("pretrain_steps", "finetune_steps", "keyframe_steps", "full_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def theta(self) -> float:
        return math.radians(self.theta_deg)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StyleConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path: Optional[str]) -> "StyleConfig":
        if path is None:
            return cls()
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
