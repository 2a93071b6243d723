"""Pinhole cameras, ray sampling, volume rendering and the losses built on it."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import torch

DEPTH_EPS = 1e-6


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    camera_to_world: np.ndarray  # (3, 4)
    near: float = 0.05
    far: float = 20.0
    id: int = 0

    def __post_init__(self):
        self.camera_to_world = np.asarray(self.camera_to_world, dtype=np.float64).reshape(3, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        rot = self.camera_to_world[:, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")

    @property
    def origin(self) -> np.ndarray:
        return self.camera_to_world[:, 3]

    def to_dict(self) -> dict:
        return {
            "id": self.id, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height, "near": self.near, "far": self.far,
            "camera_to_world": self.camera_to_world.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   np.asarray(d["camera_to_world"]), d.get("near", 0.05), d.get("far", 20.0), int(d.get("id", 0)))

    def project(self, points: np.ndarray):
        """World points (..., 3) -> (col, row) continuous pixel coords and camera depth."""
        rot, org = self.camera_to_world[:, :3], self.camera_to_world[:, 3]
        pc = (points - org) @ rot  # world -> camera
        z = -pc[..., 2]
        col = self.fx * pc[..., 0] / z + self.cx
        row = -self.fy * pc[..., 1] / z + self.cy
        return col, row, z


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose looking from ``eye`` at ``target`` down the camera -z axis."""
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    cam_up = np.cross(right, fwd)
    return np.concatenate([np.stack([right, cam_up, -fwd], axis=1), eye[:, None]], axis=1)


@dataclass
class Rays:
    """A batch of rays ``o + s d`` with ``s`` in ``[near, far]``."""

    origins: torch.Tensor  # (B, 3)
    dirs: torch.Tensor  # (B, 3), unit
    near: torch.Tensor  # (B,)
    far: torch.Tensor  # (B,)

    def __len__(self):
        return self.origins.shape[0]

    def __getitem__(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.dirs[idx], self.near[idx], self.far[idx])

    def to(self, dtype) -> "Rays":
        return Rays(self.origins.to(dtype), self.dirs.to(dtype), self.near.to(dtype), self.far.to(dtype))

    @staticmethod
    def cat(items: Sequence["Rays"]) -> "Rays":
        return Rays(*(torch.cat([getattr(r, k) for r in items]) for k in ("origins", "dirs", "near", "far")))


@dataclass
class ImageBuffer:
    rgb: torch.Tensor  # (H, W, 3)
    depth: Optional[torch.Tensor] = None
    alpha: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.rgb.dim() != 3 or self.rgb.shape[0] * self.rgb.shape[1] == 0:
            raise ValueError("image must be (H, W, C) with H*W > 0")

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


def pixel_grid(height: int, width: int):
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)


def generate_rays(camera: Camera, pixels=None, dtype=torch.float64) -> Rays:
    """Rays through pixel centers; ``pixels`` is an (N, 2) array of (row, col)."""
    if pixels is None:
        pixels = pixel_grid(camera.height, camera.width)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if np.any(pixels[:, 0] < 0) or np.any(pixels[:, 0] >= camera.height) or \
            np.any(pixels[:, 1] < 0) or np.any(pixels[:, 1] >= camera.width):
        raise ValueError("pixel outside image")
    x = (pixels[:, 1] + 0.5 - camera.cx) / camera.fx
    y = -(pixels[:, 0] + 0.5 - camera.cy) / camera.fy
    d_cam = np.stack([x, y, -np.ones_like(x)], axis=1)
    d = d_cam @ camera.camera_to_world[:, :3].T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(camera.origin, d.shape)
    n = d.shape[0]
    return Rays(torch.tensor(o, dtype=dtype), torch.tensor(d, dtype=dtype),
                torch.full((n,), camera.near, dtype=dtype), torch.full((n,), camera.far, dtype=dtype))


def clip_to_box(rays: Rays, bbox):
    """Intersect rays with an axis-aligned box; returns (near, far, hit)."""
    bbox = torch.as_tensor(bbox, dtype=rays.origins.dtype)
    d = rays.dirs
    safe = torch.where(d.abs() < 1e-12, torch.full_like(d, 1e-12), d)
    t0 = (bbox[0] - rays.origins) / safe
    t1 = (bbox[1] - rays.origins) / safe
    tmin = torch.minimum(t0, t1).amax(dim=-1)
    tmax = torch.maximum(t0, t1).amin(dim=-1)
    near = torch.maximum(rays.near, tmin)
    far = torch.minimum(rays.far, tmax)
    hit = far > near
    return torch.where(hit, near, rays.near), torch.where(hit, far, rays.far), hit


def sample_depths(near, far, n_samples: int, stratified: bool = False, generator=None):
    """Sample positions ``(B, S)`` and interval lengths ``(B, S)``.

    Sample ``i`` sits at the left edge of bin ``i`` (jittered inside the bin when
    stratified); the last interval runs to ``far``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    steps = torch.arange(n_samples, dtype=near.dtype)
    offset = torch.zeros(near.shape[0], n_samples, dtype=near.dtype)
    if stratified:
        offset = torch.rand(near.shape[0], n_samples, generator=generator, dtype=near.dtype)
    width = (far - near)[:, None] / n_samples
    s = near[:, None] + (steps[None] + offset) * width
    deltas = torch.cat([s[:, 1:] - s[:, :-1], far[:, None] - s[:, -1:]], dim=1)
    return s, deltas


def composite(sigmas, deltas):
    """Quadrature weights ``w_i = T_i (1 - exp(-sigma_i delta_i))``."""
    tau = sigmas * deltas
    trans = torch.exp(-torch.cumsum(torch.cat([torch.zeros_like(tau[:, :1]), tau[:, :-1]], dim=1), dim=1))
    # shrink by the worst-case rounding of a k-term sum so sum(w) <= 1 also holds as computed
    safety = 1.0 - tau.shape[1] * torch.finfo(tau.dtype).eps
    return trans * -torch.expm1(-tau) * safety


@dataclass
class SampleCache:
    """Significant samples of a fixed-density render, reused while density is frozen."""

    ray_index: torch.Tensor  # (M,)
    points: torch.Tensor  # (M, 3)
    frames: torch.Tensor  # (M,)
    dirs: torch.Tensor  # (M, 3)
    weights: torch.Tensor  # (M,)
    alpha: torch.Tensor  # (B,)
    depth: torch.Tensor  # (B,)
    n_rays: int

    def subset(self, rays_idx) -> "SampleCache":
        rays_idx = torch.as_tensor(rays_idx, dtype=torch.long)
        remap = torch.full((self.n_rays,), -1, dtype=torch.long)
        remap[rays_idx] = torch.arange(rays_idx.numel())
        keep = remap[self.ray_index] >= 0
        return SampleCache(remap[self.ray_index[keep]], self.points[keep], self.frames[keep], self.dirs[keep],
                           self.weights[keep], self.alpha[rays_idx], self.depth[rays_idx], rays_idx.numel())


def render_rays(field, rays: Rays, t, n_samples: int = 96, stratified: bool = False, generator=None,
                background=(1.0, 1.0, 1.0), weight_threshold: float = 0.0, clip: bool = True,
                return_cache: bool = False):
    """Volume-render a batch of rays at frame(s) ``t``.

    Returns a dict with ``rgb`` (B, 3), ``depth`` (B,) and ``alpha`` (B,). Samples
    with weight at or below ``weight_threshold`` skip color evaluation.
    """
    dtype = field.dtype
    rays = rays.to(dtype)
    if torch.any(rays.near >= rays.far):
        raise ValueError("degenerate ray: near >= far")
    n = len(rays)
    near, far = rays.near, rays.far
    hit = torch.ones(n, dtype=torch.bool)
    if clip and getattr(field, "bbox", None) is not None:
        near, far, hit = clip_to_box(rays, field.bbox)
    s, deltas = sample_depths(near, far, n_samples, stratified, generator)
    points = rays.origins[:, None, :] + s[..., None] * rays.dirs[:, None, :]
    frames = torch.as_tensor(t, dtype=dtype)
    if frames.dim() == 1:
        frames = frames[:, None].expand(n, n_samples)
    else:
        frames = frames.expand(n, n_samples)
    sigma = field.density(points, frames)
    sigma = torch.where(hit[:, None], sigma, torch.zeros_like(sigma))
    weights = composite(sigma, deltas)
    alpha = weights.sum(dim=1)
    depth = (weights * s).sum(dim=1) / alpha.clamp_min(DEPTH_EPS)

    dirs = rays.dirs[:, None, :].expand(n, n_samples, 3)
    if weight_threshold > 0:
        mask = weights > weight_threshold
        ray_idx = torch.arange(n)[:, None].expand(n, n_samples)[mask]
        c = field.color(points[mask], frames[mask], dirs[mask])
        rgb = torch.zeros(n, 3, dtype=dtype).index_add(0, ray_idx, weights[mask][:, None] * c)
    else:
        mask = None
        c = field.color(points.reshape(-1, 3), frames.reshape(-1), dirs.reshape(-1, 3)).reshape(n, n_samples, 3)
        rgb = (weights[..., None] * c).sum(dim=1)
    bg = torch.as_tensor(background, dtype=dtype)
    rgb = rgb + (1.0 - alpha)[:, None] * bg
    out = {"rgb": rgb, "depth": depth, "alpha": alpha}
    if return_cache:
        if mask is None:
            mask = weights > weight_threshold
        ray_idx = torch.arange(n)[:, None].expand(n, n_samples)[mask]
        out["cache"] = SampleCache(ray_idx, points[mask].detach(), frames[mask].detach(), dirs[mask].detach(),
                                   weights[mask].detach(), alpha.detach(), depth.detach(), n)
    return out


def render_cached(field, cache: SampleCache, background=(1.0, 1.0, 1.0)):
    """Color of each cached ray with density weights held fixed."""
    dtype = field.dtype
    c = field.color(cache.points.to(dtype), cache.frames.to(dtype), cache.dirs.to(dtype))
    rgb = torch.zeros(cache.n_rays, 3, dtype=dtype).index_add(0, cache.ray_index, cache.weights.to(dtype)[:, None] * c)
    bg = torch.as_tensor(background, dtype=dtype)
    return rgb + (1.0 - cache.alpha.to(dtype))[:, None] * bg


def render_ray(field, ray: Rays, t, n_samples: int = 96, stratified: bool = False, seed: Optional[int] = None,
               background=(0.0, 0.0, 0.0), clip: bool = True):
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    out = render_rays(field, ray, t, n_samples, stratified, gen, background, clip=clip)
    return out["rgb"], out["depth"], out["alpha"]


def render_image(field, camera: Camera, t, n_samples: int = 96, background=(1.0, 1.0, 1.0),
                 chunk: int = 8192, stratified: bool = False, seed: int = 0,
                 weight_threshold: float = 0.0) -> ImageBuffer:
    """Render every pixel of ``camera`` at frame ``t`` (no gradient recording)."""
    rays = generate_rays(camera, dtype=field.dtype)
    gen = torch.Generator().manual_seed(seed)
    rgb, depth, alpha = [], [], []
    with torch.no_grad():
        for i in range(0, len(rays), chunk):
            out = render_rays(field, rays[i:i + chunk], t, n_samples, stratified, gen, background,
                              weight_threshold=weight_threshold)
            rgb.append(out["rgb"])
            depth.append(out["depth"])
            alpha.append(out["alpha"])
    h, w = camera.height, camera.width
    return ImageBuffer(torch.cat(rgb).reshape(h, w, 3), torch.cat(depth).reshape(h, w),
                       torch.cat(alpha).reshape(h, w))


def photometric_loss(predicted, target):
    """Sum of squared color errors over a batch of rays."""
    if predicted.numel() == 0:
        raise ValueError("empty ray batch")
    return ((predicted - target) ** 2).sum()


def _plane_tv(planes):
    total = 0.0
    for p in planes:
        total = total + ((p[..., 1:, :] - p[..., :-1, :]) ** 2).mean() + ((p[..., :, 1:] - p[..., :, :-1]) ** 2).mean()
    return total


def tv_loss(field, branches=("density", "appearance")):
    """Mean squared difference of adjacent cells along both axes of every plane, summed over planes."""
    total = torch.zeros((), dtype=field.dtype)
    if "density" in branches:
        total = total + _plane_tv(field.density_planes)
    if "appearance" in branches:
        total = total + _plane_tv(field.app_planes)
    return total


def image_loss_from(fn: Callable[[torch.Tensor], torch.Tensor]):
    """Wrap a differentiable ``image -> scalar`` function as a deferred-backprop callback."""

    def callback(image: torch.Tensor):
        img = image.detach().clone().requires_grad_(True)
        with torch.enable_grad():
            loss = fn(img)
            (grad,) = torch.autograd.grad(loss, img)
        return loss.detach(), grad

    return callback


def deferred_backprop(field, camera: Camera, t, image_loss, patch=(32, 32), n_samples: int = 96,
                      background=(1.0, 1.0, 1.0), renderer=None, scale: float = 1.0):
    """Image-space loss with memory bounded by one patch of recorded rendering.

    ``renderer(pixel_index)`` maps flat pixel indices to differentiable colors
    (N, 3); by default a full render of ``field`` through ``camera``. The loss
    gradient times ``scale`` is accumulated into the parameters' ``.grad``.
    """
    h, w = camera.height, camera.width
    if renderer is None:
        rays = generate_rays(camera, dtype=field.dtype)

        def renderer(idx):
            return render_rays(field, rays[idx], t, n_samples, background=background)["rgb"]

    all_idx = torch.arange(h * w)
    with torch.no_grad():
        chunks = [renderer(all_idx[i:i + 8192]) for i in range(0, h * w, 8192)]
    image = torch.cat(chunks).reshape(h, w, 3)
    loss, grad = image_loss(image)
    if not torch.isfinite(grad).all():
        raise FloatingPointError("image loss returned non-finite pixel gradients")
    grad = grad.reshape(h, w, 3)
    ph, pw = patch
    for r0 in range(0, h, ph):
        for c0 in range(0, w, pw):
            rows = torch.arange(r0, min(r0 + ph, h))
            cols = torch.arange(c0, min(c0 + pw, w))
            idx = (rows[:, None] * w + cols[None, :]).reshape(-1)
            rgb = renderer(idx)
            g = grad.reshape(-1, 3)[idx].to(rgb.dtype)
            if rgb.requires_grad:
                torch.autograd.backward(rgb, g * scale)
    return loss
