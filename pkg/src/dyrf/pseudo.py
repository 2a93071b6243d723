"""Temporal pseudo-references: propagate one stylized view across a time-lapse."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import io
from .render import render_image

PSEUDO_NAME = "pseudo_%04d.png"
MANIFEST = "pseudo.json"


@dataclass
class PseudoReferenceSet:
    frames: List[torch.Tensor]  # T images (H, W, 3)
    reference_index: int
    camera_id: int
    keyframes: List[int]

    def __post_init__(self):
        shapes = {tuple(f.shape) for f in self.frames}
        if len(shapes) != 1:
            raise ValueError("pseudo-references differ in size")
        if not 0 <= self.reference_index < len(self.frames):
            raise ValueError("reference index outside the sequence")

    @property
    def n_frames(self):
        return len(self.frames)

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, f in enumerate(self.frames):
            io.save_png(out / (PSEUDO_NAME % i), f)
        manifest = {"T": self.n_frames, "k": self.reference_index, "N": len(self.keyframes),
                    "keyframes": list(self.keyframes), "camera": self.camera_id}
        with open(out / MANIFEST, "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)


def render_timelapse(field, camera, n_frames: int, n_samples: int = 96, background=(1.0, 1.0, 1.0)):
    """Render the fixed camera at every frame index."""
    return [render_image(field, camera, t, n_samples, background=background).rgb for t in range(n_frames)]


def select_keyframes(n_frames: int, k: int, n: int) -> List[int]:
    """``n`` sorted frame indices containing ``k``, otherwise spread evenly over the sequence."""
    if not 1 <= n <= n_frames:
        raise ValueError(f"need 1 <= N <= T, got N={n}, T={n_frames}")
    if not 0 <= k < n_frames:
        raise ValueError("reference frame outside the sequence")
    uniform = sorted({int(np.floor(x + 0.5)) for x in np.linspace(0, n_frames - 1, n)})
    chosen = set(uniform) | {k}
    while len(chosen) > n:
        # drop the evenly spaced pick nearest the reference (never k itself)
        drop = min((i for i in chosen if i != k), key=lambda i: (abs(i - k), i))
        chosen.discard(drop)
    while len(chosen) < n:
        # largest-gap insertion: the free index farthest from every chosen one
        free = [i for i in range(n_frames) if i not in chosen]
        chosen.add(max(free, key=lambda i: (min(abs(i - c) for c in chosen), -i)))
    return sorted(chosen)


def _window_offsets(radius: int):
    offs = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    # nearest first so that equal-cost candidates resolve to the smallest displacement
    return sorted(offs, key=lambda o: (o[0] ** 2 + o[1] ** 2, o[0], o[1]))


def match_offsets(query: np.ndarray, source: np.ndarray, patch: int, radius: int, init=None, refine: int = 2):
    """Per-pixel displacement into ``source`` minimizing patch SSD against ``query``.

    Candidates: every offset in the window (nearest first), then the ``refine``
    neighborhood around ``init`` when given. Ties keep the earlier candidate.
    """
    h, w, _ = query.shape
    half = patch // 2
    qpad = np.pad(query, ((half, half), (half, half), (0, 0)), mode="edge")
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    best = np.full((h, w), np.inf)
    best_off = np.zeros((h, w, 2), dtype=np.int64)

    def consider(dy, dx):
        ty, tx = ys + dy, xs + dx
        inside = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
        tyc, txc = np.clip(ty, 0, h - 1), np.clip(tx, 0, w - 1)
        cost = _candidate_cost(qpad, source, tyc, txc, half, h, w)
        cost = np.where(inside, cost, np.inf)
        better = cost < best
        best[better] = cost[better]
        best_off[better] = np.stack([dy, dx], axis=-1)[better] if np.ndim(dy) else (dy, dx)

    for dy, dx in _window_offsets(radius):
        consider(dy, dx)
    if init is not None:
        for ry in range(-refine, refine + 1):
            for rx in range(-refine, refine + 1):
                consider(init[..., 0] + ry, init[..., 1] + rx)
    return best_off, best


def _candidate_cost(qpad, source, tyc, txc, half, h, w):
    """Patch SSD between query patches at every pixel and source patches at (tyc, txc)."""
    spad = np.pad(source, ((half, half), (half, half), (0, 0)), mode="edge")
    cost = np.zeros((h, w))
    for py in range(-half, half + 1):
        for px in range(-half, half + 1):
            q = qpad[half + py:half + py + h, half + px:half + px + w]
            s = spad[tyc + half + py, txc + half + px]
            cost += ((q - s) ** 2).sum(axis=-1)
    return cost


def _downscale(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    x = img[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def propagate_frame(stylized_ref: np.ndarray, source: np.ndarray, target: np.ndarray, patch: int = 5,
                    window: int = 21, levels: int = 3) -> np.ndarray:
    """Stylize ``target`` by patch analogy with the (``source``, ``stylized_ref``) pair."""
    if patch % 2 != 1:
        raise ValueError("patch size must be odd")
    radius = window // 2
    pyr_s, pyr_t = [source], [target]
    for _ in range(levels - 1):
        if min(pyr_s[-1].shape[:2]) < 2 * patch:
            break
        pyr_s.append(_downscale(pyr_s[-1]))
        pyr_t.append(_downscale(pyr_t[-1]))
    offsets = None
    for lvl in reversed(range(len(pyr_s))):
        s, t = pyr_s[lvl], pyr_t[lvl]
        init = None
        if offsets is not None:
            up = np.repeat(np.repeat(offsets * 2, 2, axis=0), 2, axis=1)
            init = np.zeros(t.shape[:2] + (2,), dtype=np.int64)
            hh, ww = min(up.shape[0], t.shape[0]), min(up.shape[1], t.shape[1])
            init[:hh, :ww] = up[:hh, :ww]
        offsets, _ = match_offsets(t, s, patch, radius, init)
    h, w = target.shape[:2]
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    my = np.clip(ys + offsets[..., 0], 0, h - 1)
    mx = np.clip(xs + offsets[..., 1], 0, w - 1)
    residual = target - source[my, mx]
    return np.clip(stylized_ref[my, mx] + residual, 0.0, 1.0)


def propagate_style(stylized_ref, photoreal_frames: Sequence, k: int, patch: int = 5, window: int = 21,
                    levels: int = 3) -> List[torch.Tensor]:
    """Pseudo-reference for every frame; frame ``k`` is the stylized reference itself."""
    ref = _np(stylized_ref)
    frames = [_np(f) for f in photoreal_frames]
    if any(f.shape != ref.shape for f in frames):
        raise ValueError("all images must share one size")
    out = []
    for i, f in enumerate(frames):
        if i == k:
            out.append(torch.as_tensor(stylized_ref).clone())
            continue
        res = propagate_frame(ref, frames[k], f, patch, window, levels)
        out.append(torch.tensor(res, dtype=torch.as_tensor(stylized_ref).dtype))
    return out


def _np(x) -> np.ndarray:
    if torch.is_tensor(x):
        return x.detach().cpu().numpy().astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def import_pseudo_refs(source, stylized_ref, k: int, n_frames: int, n_keyframes: int = 4,
                       camera_id: int = 0) -> PseudoReferenceSet:
    """Load externally generated pseudo-references (directory or list of PNG paths)."""
    if isinstance(source, (str, Path)):
        root = Path(source)
        paths = sorted(root.glob("pseudo_*.png"))
    else:
        paths = [Path(p) for p in source]
    if len(paths) != n_frames:
        raise ValueError(f"expected {n_frames} pseudo-references, found {len(paths)}")
    ref = torch.as_tensor(stylized_ref)
    frames = [io.load_png(p, ref.dtype) for p in paths]
    if any(f.shape != ref.shape for f in frames):
        raise ValueError("pseudo-reference size does not match the stylized reference")
    frames[k] = ref.clone()
    return PseudoReferenceSet(frames, k, camera_id, select_keyframes(n_frames, k, n_keyframes))


def load_pseudo_set(root) -> PseudoReferenceSet:
    root = Path(root)
    with open(root / MANIFEST) as fh:
        m = json.load(fh)
    frames = [io.load_png(root / (PSEUDO_NAME % i)) for i in range(m["T"])]
    return PseudoReferenceSet(frames, m["k"], m["camera"], m["keyframes"])
