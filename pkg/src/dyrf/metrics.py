"""Reference perceptual distance and flow-warped temporal consistency."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence

import numpy as np
import torch

from .features import ExtractorWeights, cosine_distance, extract


def ref_perceptual_per_frame(frames: Sequence, style_ref, extractor: ExtractorWeights) -> List[float]:
    ref = extract(torch.as_tensor(style_ref, dtype=torch.float64), extractor.to(torch.float64)).data
    out = []
    for f in frames:
        feat = extract(torch.as_tensor(f, dtype=torch.float64), extractor.to(torch.float64)).data
        if feat.shape != ref.shape:
            raise ValueError("frame and reference sizes differ")
        out.append(float(cosine_distance(feat, ref).mean()))
    return out


def metric_ref_perceptual(frames: Sequence, style_ref, extractor: ExtractorWeights) -> float:
    """Mean over frames of the mean per-cell cosine distance to the style reference features."""
    if len(frames) == 0:
        raise ValueError("no frames to score")
    return float(np.mean(ref_perceptual_per_frame(frames, style_ref, extractor)))


def warp(image: np.ndarray, flow: np.ndarray, valid: np.ndarray):
    """Sample ``image`` at ``pixel + flow`` bilinearly; returns (warped, mask)."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    x = xs + flow[..., 0]
    y = ys + flow[..., 1]
    x0, y0 = np.floor(x).astype(np.int64), np.floor(y).astype(np.int64)
    inside = (x0 >= 0) & (y0 >= 0) & (x0 + 1 < w) & (y0 + 1 < h)
    x0c, y0c = np.clip(x0, 0, w - 2), np.clip(y0, 0, h - 2)
    fx, fy = (x - x0c)[..., None], (y - y0c)[..., None]
    out = (image[y0c, x0c] * (1 - fx) * (1 - fy) + image[y0c, x0c + 1] * fx * (1 - fy)
           + image[y0c + 1, x0c] * (1 - fx) * fy + image[y0c + 1, x0c + 1] * fx * fy)
    return out, np.asarray(valid, dtype=bool) & inside


def consistency_per_pair(frames: Sequence, flows: Dict[int, tuple], gap: int) -> List[float]:
    frames = [np.asarray(f.detach().cpu() if torch.is_tensor(f) else f, dtype=np.float64) for f in frames]
    if len(frames) <= gap:
        raise ValueError(f"need more than {gap} frames")
    out = []
    for i in range(len(frames) - gap):
        if i not in flows:
            raise KeyError(f"missing flow for pair ({i}, {i + gap})")
        flow, valid = flows[i]
        warped, mask = warp(frames[i + gap], flow, valid)
        if mask.any():
            out.append(float(((warped - frames[i]) ** 2).sum(axis=-1)[mask].mean() / frames[i].shape[-1]))
        else:
            out.append(0.0)
    return out


def metric_consistency(frames: Sequence, flows: Dict[int, tuple], gap: int) -> float:
    """Masked MSE between frame ``i`` and frame ``i + gap`` warped back by the flow, averaged over ``i``.

    ``flows[i]`` is ``(flow, valid)`` from frame ``i`` into frame ``i + gap``.
    """
    return float(np.mean(consistency_per_pair(frames, flows, gap)))


@dataclass
class MetricReport:
    ref_perceptual: float
    short_range: float
    long_range: float
    per_frame: Dict[str, List[float]] = field(default_factory=dict)
    extra: Dict[str, float] = field(default_factory=dict)
    config: Dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("ref_perceptual", "short_range", "long_range"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "MetricReport":
        with open(path) as fh:
            return cls.from_json(fh.read())
