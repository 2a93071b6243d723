"""Voxel-bucketed reference rays and registration of training rays to stylized pseudo-rays."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

log = logging.getLogger(__name__)


def quantize(points, bbox, res: int):
    """Voxel index ``floor(res * normalized)`` clamped to ``[0, res - 1]``, plus an outside flag."""
    points = np.asarray(points, dtype=np.float64)
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    norm = (points - bbox[0]) / (bbox[1] - bbox[0])
    outside = np.any((norm < 0) | (norm > 1), axis=-1)
    idx = np.clip(np.floor(res * norm), 0, res - 1).astype(np.int64)
    return idx, outside


def _linear(idx, res):
    return (idx[..., 0] * res + idx[..., 1]) * res + idx[..., 2]


@dataclass
class TemporalReferenceDictionary:
    """Entries are stored sorted by voxel, raster order kept inside each bucket."""

    t: float
    res: int
    bbox: np.ndarray
    cap: int
    voxel: np.ndarray  # (M, 3) int
    points: np.ndarray  # (M, 3)
    dirs: np.ndarray  # (M, 3)
    colors: np.ndarray  # (M, 3)
    pixel: np.ndarray  # (M,) flat pixel index of the source ray
    keys: np.ndarray  # (M,) linear voxel id, sorted

    def __len__(self):
        return self.points.shape[0]

    def buckets(self):
        """Mapping voxel tuple -> entry indices."""
        out = {}
        for i, v in enumerate(map(tuple, self.voxel)):
            out.setdefault(v, []).append(i)
        return out

    def dump(self, fh):
        for v, members in sorted(self.buckets().items()):
            fh.write(f"{self.t:g} {v[0]} {v[1]} {v[2]} {len(members)}\n")
            for i in members:
                vals = list(self.points[i]) + list(self.dirs[i]) + list(self.colors[i])
                fh.write(" ".join(f"{x:.9g}" for x in vals) + "\n")


def build_from_lift(points, dirs, colors, valid, bbox, res: int, cap: int, t: float) -> TemporalReferenceDictionary:
    """Bucket lifted reference rays (given in raster order); keep the first ``cap`` per voxel."""
    points = np.asarray(points, dtype=np.float64)
    pix = np.nonzero(np.asarray(valid))[0]
    vox, _ = quantize(points[pix], bbox, res)
    keys = _linear(vox, res)
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    # rank within bucket, in raster order
    start = np.searchsorted(keys, keys, side="left")
    rank = np.arange(keys.size) - start
    keep = order[rank < cap]
    keep_keys = keys[rank < cap]
    sel = pix[keep]
    return TemporalReferenceDictionary(
        t, res, np.asarray(bbox, dtype=np.float64).reshape(2, 3), cap, vox[keep],
        points[sel], np.asarray(dirs, dtype=np.float64)[sel], np.clip(np.asarray(colors, dtype=np.float64)[sel], 0, 1),
        sel, keep_keys)


def build_dictionary(depth, alpha, camera, pseudo_ref, t, bbox, res: int = 64, cap: int = 8,
                     alpha_min: float = 0.5) -> TemporalReferenceDictionary:
    """Lift one pseudo-reference through the photoreal depth of the reference camera."""
    from .render import generate_rays

    h, w = camera.height, camera.width
    ref = pseudo_ref.rgb if hasattr(pseudo_ref, "rgb") else pseudo_ref
    if tuple(ref.shape[:2]) != (h, w):
        raise ValueError("pseudo-reference resolution does not match the camera")
    rays = generate_rays(camera, dtype=torch.float64)
    o, d = rays.origins.numpy(), rays.dirs.numpy()
    depth = _np(depth).reshape(-1)
    alpha = _np(alpha).reshape(-1)
    valid = alpha >= alpha_min
    if not valid.any():
        log.warning("reference view has no surface pixels at t=%s; dictionary is empty", t)
    pts = o + np.where(valid, depth, 0.0)[:, None] * d
    return build_from_lift(pts, d, _np(ref).reshape(-1, 3), valid, bbox, res, cap, t)


def _np(x):
    if torch.is_tensor(x):
        return x.detach().cpu().numpy().astype(np.float64)
    return np.asarray(x, dtype=np.float64)


@dataclass
class PseudoRaySet:
    t: float
    ray_index: np.ndarray  # (K,) index into the queried ray batch
    entry_index: np.ndarray  # (K,) index into the dictionary
    colors: np.ndarray  # (K, 3)
    distance: np.ndarray  # (K,)

    def __len__(self):
        return self.ray_index.size


def register(dictionary: TemporalReferenceDictionary, points, dirs, valid=None, theta: float = math.radians(30.0)) -> PseudoRaySet:
    """Match query surface points to the closest same-voxel entry within ``theta`` of direction.

    ``points`` are the queried rays' surface points at the dictionary's frame;
    ``valid`` marks rays that hit a surface at all.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    empty = PseudoRaySet(dictionary.t, np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros(0))
    if len(dictionary) == 0 or n == 0:
        return empty
    vox, outside = quantize(points, dictionary.bbox, dictionary.res)
    keys = _linear(vox, dictionary.res)
    lo = np.searchsorted(dictionary.keys, keys, side="left")
    hi = np.searchsorted(dictionary.keys, keys, side="right")
    cap = dictionary.cap
    cand = lo[:, None] + np.arange(cap)[None, :]
    ok = (cand < hi[:, None]) & valid[:, None] & ~outside[:, None]
    cand = np.where(ok, cand, 0)
    cos = np.einsum("nkc,nc->nk", dictionary.dirs[cand], dirs)
    ok &= cos > math.cos(theta)
    dist = np.linalg.norm(dictionary.points[cand] - points[:, None, :], axis=-1)
    dist = np.where(ok, dist, np.inf)
    best = np.argmin(dist, axis=1)  # first minimum = smallest stored index
    found = ok.any(axis=1)
    rays = np.nonzero(found)[0]
    entries = cand[rays, best[rays]]
    return PseudoRaySet(dictionary.t, rays, entries, dictionary.colors[entries], dist[rays, best[rays]])


def fine_loss(predicted, pseudo_colors):
    """Mean over registered rays of the squared color error; 0 for an empty set."""
    if predicted.shape[0] == 0:
        return predicted.sum() * 0.0
    target = torch.as_tensor(pseudo_colors, dtype=predicted.dtype)
    return ((predicted - target) ** 2).sum(dim=-1).mean()
