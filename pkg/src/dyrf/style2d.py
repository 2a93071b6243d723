"""A small deterministic 2D stylizer used to author a stylized reference view."""

from __future__ import annotations

import numpy as np
import torch

# warm-to-cool poster palette, dark to light
PALETTE = np.array([
    [0.10, 0.08, 0.25],
    [0.45, 0.10, 0.40],
    [0.90, 0.35, 0.20],
    [0.98, 0.80, 0.30],
    [0.95, 0.95, 0.80],
])


def luminance(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114])


def posterize(img, palette=PALETTE, period: int = 4, strength: float = 0.12):
    """Map luminance onto ``palette`` and overlay diagonal hatching on darker tones."""
    was_tensor = torch.is_tensor(img)
    x = img.detach().cpu().numpy().astype(np.float64) if was_tensor else np.asarray(img, dtype=np.float64)
    h, w = x.shape[:2]
    lum = np.clip(luminance(x), 0.0, 1.0)
    pos = lum * (len(palette) - 1)
    lo = np.floor(pos).astype(np.int64).clip(0, len(palette) - 2)
    frac = (pos - lo)[..., None]
    # keep a hint of the source hue so objects stay distinguishable
    out = 0.8 * (palette[lo] * (1 - frac) + palette[lo + 1] * frac) + 0.2 * x
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    hatch = ((rows + cols) % period == 0) & (lum < 0.8)
    out[hatch] *= 1.0 - strength
    out = np.clip(out, 0.0, 1.0)
    return torch.tensor(out, dtype=img.dtype) if was_tensor else out
