"""Procedural dynamic scenes with analytic images, depth and optical flow."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import io
from .render import Camera, generate_rays, look_at, pixel_grid

OCCLUSION_TOL = 1e-4


@dataclass
class Primitive:
    shape: str  # "sphere" or "box"
    path: List[Tuple[float, Tuple[float, float, float]]]  # (frame, center) keypoints
    size: Tuple[float, ...]  # (radius,) or box half-extents
    albedo: Tuple[float, float, float]

    def center(self, t: float) -> np.ndarray:
        times = np.array([p[0] for p in self.path], dtype=np.float64)
        pts = np.array([p[1] for p in self.path], dtype=np.float64)
        return np.array([np.interp(t, times, pts[:, i]) for i in range(3)])

    def half_extent(self) -> np.ndarray:
        if self.shape == "sphere":
            return np.full(3, self.size[0])
        return np.asarray(self.size, dtype=np.float64)

    def to_dict(self):
        return {"shape": self.shape, "path": [[t, list(c)] for t, c in self.path],
                "size": list(self.size), "albedo": list(self.albedo)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["shape"], [(float(t), tuple(c)) for t, c in d["path"]], tuple(d["size"]), tuple(d["albedo"]))


@dataclass
class SceneSpec:
    name: str
    primitives: List[Primitive]
    bbox: np.ndarray  # (2, 3)
    n_frames: int
    cameras: List[Camera]
    background: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    reference_camera: int = 0

    def __post_init__(self):
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(2, 3)
        if self.n_frames < 1:
            raise ValueError("scene needs at least one frame")
        for prim in self.primitives:
            ext = prim.half_extent()
            for t in range(self.n_frames):
                c = prim.center(t)
                if np.any(c - ext < self.bbox[0]) or np.any(c + ext > self.bbox[1]):
                    raise ValueError(f"primitive leaves the scene box at frame {t}")

    def camera(self, cam_id: int) -> Camera:
        for cam in self.cameras:
            if cam.id == cam_id:
                return cam
        raise KeyError(f"no camera with id {cam_id}")

    def to_dict(self):
        return {"name": self.name, "primitives": [p.to_dict() for p in self.primitives],
                "bbox": self.bbox.tolist(), "n_frames": self.n_frames,
                "cameras": [c.to_dict() for c in self.cameras], "background": list(self.background),
                "reference_camera": self.reference_camera}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], [Primitive.from_dict(p) for p in d["primitives"]], np.asarray(d["bbox"]),
                   int(d["n_frames"]), [Camera.from_dict(c) for c in d["cameras"]],
                   tuple(d.get("background", (1.0, 1.0, 1.0))), int(d.get("reference_camera", 0)))


def _orbit_cameras(n, radius, elevation_deg, size, fov_deg, target=(0.0, 0.0, 0.0)):
    cams = []
    f = 0.5 * size / np.tan(np.radians(fov_deg) / 2)
    el = np.radians(elevation_deg)
    for i in range(n):
        az = 2 * np.pi * i / n + np.radians(20.0)
        eye = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera(f, f, size / 2, size / 2, size, size, look_at(eye, target),
                           near=0.5, far=2 * radius, id=i))
    return cams


def orbit_spheres(size: int = 64, n_frames: int = 8) -> SceneSpec:
    """Three moving spheres seen by four cameras on an orbit."""
    last = n_frames - 1
    prims = [
        Primitive("sphere", [(0, (-0.6, -0.5, 0.0)), (last, (0.6, -0.5, 0.1))], (0.45,), (0.85, 0.25, 0.2)),
        Primitive("sphere", [(0, (0.3, 0.55, -0.3)), (last / 2, (0.0, 0.3, 0.35)), (last, (-0.4, 0.55, -0.2))],
                  (0.4,), (0.2, 0.45, 0.85)),
        Primitive("sphere", [(0, (0.5, 0.0, 0.5)), (last, (0.3, 0.1, -0.5))], (0.3,), (0.95, 0.8, 0.2)),
    ]
    cams = _orbit_cameras(4, 4.0, 25.0, size, 32.0)
    return SceneSpec("orbit-spheres", prims, np.array([[-1.25] * 3, [1.25] * 3]), n_frames, cams)


def slide_box(size: int = 64, n_frames: int = 8) -> SceneSpec:
    """One camera facing a box that slides sideways in front of a back wall."""
    last = max(n_frames - 1, 1)
    prims = [
        Primitive("box", [(0, (-0.5, 0.0, 0.0)), (last, (0.5, 0.0, 0.0))], (0.3, 0.3, 0.3), (0.9, 0.5, 0.1)),
        Primitive("box", [(0, (0.0, -0.9, 0.0))], (1.1, 0.05, 1.1), (0.3, 0.35, 0.6)),
    ]
    f = 0.5 * size / np.tan(np.radians(45.0) / 2)
    pose = look_at((0.0, 3.5, 0.4), (0.0, 0.0, 0.0))
    cams = [Camera(f, f, size / 2, size / 2, size, size, pose, near=0.5, far=8.0, id=0)]
    return SceneSpec("slide-box", prims, np.array([[-1.2] * 3, [1.2] * 3]), n_frames, cams,
                     background=(0.0, 0.0, 0.0))


BUNDLED = {"orbit-spheres": orbit_spheres, "slide-box": slide_box}


def load_scene(name_or_path: str) -> SceneSpec:
    if name_or_path in BUNDLED:
        return BUNDLED[name_or_path]()
    with open(name_or_path) as fh:
        return SceneSpec.from_dict(json.load(fh))


# -- analytic ray casting --------------------------------------------------------


def intersect(spec: SceneSpec, origins: np.ndarray, dirs: np.ndarray, t: float, near: float = 1e-6):
    """Nearest hit per ray: (distance, primitive id); misses are (inf, -1)."""
    n = origins.shape[0]
    best = np.full(n, np.inf)
    ids = np.full(n, -1, dtype=np.int64)
    for pid, prim in enumerate(spec.primitives):
        c = prim.center(t)
        if prim.shape == "sphere":
            r = prim.size[0]
            oc = origins - c
            b = np.einsum("ij,ij->i", oc, dirs)
            disc = b * b - (np.einsum("ij,ij->i", oc, oc) - r * r)
            sq = np.sqrt(np.maximum(disc, 0.0))
            s0, s1 = -b - sq, -b + sq
            s = np.where(s0 > near, s0, s1)
            s = np.where((disc >= 0) & (s > near), s, np.inf)
        elif prim.shape == "box":
            lo, hi = c - np.asarray(prim.size), c + np.asarray(prim.size)
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / dirs
                t0, t1 = (lo - origins) * inv, (hi - origins) * inv
            tmin = np.nanmax(np.minimum(t0, t1), axis=1)
            tmax = np.nanmin(np.maximum(t0, t1), axis=1)
            s = np.where(tmin > near, tmin, tmax)
            s = np.where((tmax >= tmin) & (s > near), s, np.inf)
        else:
            raise ValueError(f"unknown primitive shape {prim.shape!r}")
        closer = s < best
        best = np.where(closer, s, best)
        ids = np.where(closer, pid, ids)
    return best, ids


def _camera_rays(camera: Camera, pixels=None):
    rays = generate_rays(camera, pixels, dtype=torch.float64)
    return rays.origins.numpy(), rays.dirs.numpy()


def render_ground_truth(spec: SceneSpec, camera: Camera, t: float):
    """Albedo image (H, W, 3), ray depth (inf on misses) and primitive ids."""
    o, d = _camera_rays(camera)
    depth, ids = intersect(spec, o, d, t)
    albedo = np.array([p.albedo for p in spec.primitives] + [spec.background], dtype=np.float64)
    rgb = albedo[ids]  # id -1 selects the background row
    h, w = camera.height, camera.width
    return rgb.reshape(h, w, 3), depth.reshape(h, w), ids.reshape(h, w)


def ground_truth_flow(spec: SceneSpec, cam_a: Camera, t_a: float, cam_b: Camera, t_b: float):
    """Per-pixel (dx, dy) from view ``(cam_a, t_a)`` into ``(cam_b, t_b)`` plus a validity mask.

    A pixel is valid when it sees a surface, the advected point is visible in
    the target view, and all four bilinear taps around its projection see the
    same primitive there.
    """
    h, w = cam_a.height, cam_a.width
    o, d = _camera_rays(cam_a)
    depth, ids = intersect(spec, o, d, t_a)
    hit = ids >= 0
    centers_a = np.array([p.center(t_a) for p in spec.primitives] + [np.zeros(3)])
    centers_b = np.array([p.center(t_b) for p in spec.primitives] + [np.zeros(3)])
    # misses get a dummy point one unit along the ray so projection stays finite
    pts = o + np.where(hit, depth, 1.0)[:, None] * d
    moved = pts + (centers_b[ids] - centers_a[ids])
    col, row, z = cam_b.project(moved)
    z_ok = z > 1e-9
    col, row = np.where(z_ok, col, -1.0), np.where(z_ok, row, -1.0)
    pix = pixel_grid(h, w)
    flow = np.stack([col - 0.5 - pix[:, 1], row - 0.5 - pix[:, 0]], axis=1)
    valid = hit & z_ok

    # occlusion: re-cast from camera b toward the advected point
    to_pt = moved - cam_b.origin
    dist = np.linalg.norm(to_pt, axis=1)
    dirs_b = to_pt / np.maximum(dist, 1e-12)[:, None]
    seen, seen_id = intersect(spec, np.broadcast_to(cam_b.origin, dirs_b.shape), dirs_b, t_b)
    valid &= (np.abs(seen - dist) <= OCCLUSION_TOL) & (seen_id == ids)

    # bilinear footprint must stay on the same primitive
    _, _, ids_b = render_ground_truth(spec, cam_b, t_b)
    x = col - 0.5
    y = row - 0.5
    x0, y0 = np.floor(x).astype(np.int64), np.floor(y).astype(np.int64)
    inside = (x0 >= 0) & (y0 >= 0) & (x0 + 1 < cam_b.width) & (y0 + 1 < cam_b.height)
    valid &= inside
    xs, ys = np.clip(x0, 0, cam_b.width - 2), np.clip(y0, 0, cam_b.height - 2)
    for dy in (0, 1):
        for dx in (0, 1):
            valid &= ids_b[ys + dy, xs + dx] == ids
    flow = np.where(valid[:, None], flow, 0.0)
    return flow.reshape(h, w, 2), valid.reshape(h, w)


# -- datasets ---------------------------------------------------------------------


@dataclass
class Dataset:
    spec: SceneSpec
    images: torch.Tensor  # (C, T, H, W, 3)
    depths: torch.Tensor  # (C, T, H, W)

    @property
    def cameras(self):
        return self.spec.cameras

    @property
    def n_frames(self):
        return self.spec.n_frames


def make_dataset(spec: SceneSpec, dtype=torch.float32) -> Dataset:
    imgs, depths = [], []
    for cam in spec.cameras:
        row_i, row_d = [], []
        for t in range(spec.n_frames):
            rgb, depth, _ = render_ground_truth(spec, cam, t)
            row_i.append(rgb)
            row_d.append(depth)
        imgs.append(row_i)
        depths.append(row_d)
    return Dataset(spec, torch.tensor(np.array(imgs), dtype=dtype), torch.tensor(np.array(depths), dtype=dtype))


FLOW_GAPS = (1, 7)


def emit_dataset(spec: SceneSpec, out_dir) -> dict:
    """Write images, depths, flows and ``scene.json`` under ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "images").mkdir(exist_ok=True)
        (out / "depth").mkdir(exist_ok=True)
        (out / "flow").mkdir(exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    images, depths, flows = [], [], []
    for cam in spec.cameras:
        for t in range(spec.n_frames):
            rgb, depth, _ = render_ground_truth(spec, cam, t)
            name = f"c{cam.id:02d}_t{t:03d}"
            io.save_png(out / "images" / f"{name}.png", rgb)
            io.save_imgf(out / "depth" / f"{name}.imgf", np.where(np.isfinite(depth), depth, np.inf))
            images.append(f"images/{name}.png")
            depths.append(f"depth/{name}.imgf")
            for gap in FLOW_GAPS:
                if t + gap < spec.n_frames:
                    flow, valid = ground_truth_flow(spec, cam, t, cam, t + gap)
                    fname = f"flow/c{cam.id:02d}_t{t:03d}_g{gap}.flow"
                    io.save_flow(out / fname, flow, valid)
                    flows.append(fname)
    manifest = {"scene": spec.to_dict(), "n_frames": spec.n_frames,
                "cameras": [c.to_dict() for c in spec.cameras],
                "images": images, "depths": depths, "flows": flows}
    with open(out / "scene.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "scene.json"
    with open(path) as fh:
        return json.load(fh)


def load_dataset(path, dtype=torch.float32) -> Dataset:
    """Load an emitted dataset (images are read back from the PNG files)."""
    path = Path(path)
    root = path if path.is_dir() else path.parent
    manifest = load_manifest(root)
    spec = SceneSpec.from_dict(manifest["scene"])
    imgs = torch.stack([torch.stack([io.load_png(root / f"images/c{c.id:02d}_t{t:03d}.png", dtype)
                                     for t in range(spec.n_frames)]) for c in spec.cameras])
    depths = torch.stack([torch.stack([io.load_imgf(root / f"depth/c{c.id:02d}_t{t:03d}.imgf", dtype)[..., 0]
                                       for t in range(spec.n_frames)]) for c in spec.cameras])
    return Dataset(spec, imgs, depths)
