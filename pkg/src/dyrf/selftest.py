"""Fast built-in oracle checks, run by ``dyrf selftest``."""

from __future__ import annotations

import math
import time

import numpy as np
import torch

from .coarse import build_guidance
from .features import ExtractorWeights, cosine_distance, extract
from .field import HexPlaneField, dense_tensor
from .registry import build_from_lift, register
from .render import Rays, render_rays


def _tiny_field(seed, res=4, t=3):
    return HexPlaneField([[-1, -1, -1], [1, 1, 1]], t, spatial_res=res, density_rank=2, app_rank=2, app_dim=3,
                         hidden=4, density_bias=0.0, init_scale=1.0, seed=seed, dtype=torch.float64)


def check_gradients(n=5) -> float:
    """Worst relative error of autograd vs central differences on a rendered loss."""
    worst = 0.0
    for seed in range(n):
        f = _tiny_field(seed)
        g = torch.Generator().manual_seed(seed)
        o = torch.rand(6, 3, generator=g, dtype=torch.float64) - 0.5 + torch.tensor([0.0, 0.0, 2.5], dtype=torch.float64)
        d = torch.nn.functional.normalize(torch.tensor([0.0, 0.0, -1.0], dtype=torch.float64)
                                          + 0.2 * torch.randn(6, 3, generator=g, dtype=torch.float64), dim=-1)
        rays = Rays(o, d, torch.full((6,), 0.1, dtype=torch.float64), torch.full((6,), 5.0, dtype=torch.float64))
        target = torch.rand(6, 3, generator=g, dtype=torch.float64)

        def loss():
            return ((render_rays(f, rays, 1.3, 16)["rgb"] - target) ** 2).sum()

        f.zero_grad()
        loss().backward()
        for p in (f.density_planes[0], f.app_vectors[1], f.decoder.weights[0]):
            i = int(torch.randint(0, p.numel(), (1,), generator=g))
            with torch.no_grad():
                flat = p.view(-1)
                old = flat[i].item()
                flat[i] = old + 1e-6
                up = loss().item()
                flat[i] = old - 1e-6
                down = loss().item()
                flat[i] = old
            fd = (up - down) / 2e-6
            an = p.grad.view(-1)[i].item()
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst


def check_factorization(n=5) -> float:
    worst = 0.0
    for seed in range(n):
        f = _tiny_field(seed)
        vol = dense_tensor(f, "appearance")
        g = torch.Generator().manual_seed(seed)
        c = torch.rand(20, 4, generator=g, dtype=torch.float64)
        pts = c[:, :3] * 2 - 1
        frames = c[:, 3] * (f.n_frames - 1)
        got = f.appearance(pts, frames).detach()
        # quadrilinear interpolation of the dense volume
        res = torch.tensor(vol.shape[:4], dtype=torch.float64)
        x = c * (res - 1)
        i0 = x.floor().long().clamp(max=(res - 2).long())
        w = x - i0
        ref = torch.zeros_like(got)
        for corner in range(16):
            bits = [(corner >> k) & 1 for k in range(4)]
            idx = [i0[:, k] + bits[k] for k in range(4)]
            wt = torch.ones(20, dtype=torch.float64)
            for k in range(4):
                wt = wt * (w[:, k] if bits[k] else 1 - w[:, k])
            ref += wt[:, None] * vol[idx[0], idx[1], idx[2], idx[3]]
        worst = max(worst, float((got - ref).abs().max().detach()))
    return worst


class _Constant(torch.nn.Module):
    bbox = None

    def __init__(self, sigma):
        super().__init__()
        self.sigma = sigma
        self.register_buffer("_d", torch.zeros(1, dtype=torch.float64))

    @property
    def dtype(self):
        return torch.float64

    def density(self, points, frames):
        return torch.full(points.shape[:-1], self.sigma, dtype=torch.float64)

    def color(self, points, frames, dirs):
        return torch.full(points.shape[:-1] + (3,), 0.5, dtype=torch.float64)


def check_homogeneous() -> float:
    sigma, near, far = 0.7, 0.5, 2.5
    rays = Rays(torch.zeros(1, 3, dtype=torch.float64), torch.tensor([[0.0, 0.0, -1.0]], dtype=torch.float64),
                torch.tensor([near], dtype=torch.float64), torch.tensor([far], dtype=torch.float64))
    out = render_rays(_Constant(sigma), rays, 0.0, 4096, background=(0.0, 0.0, 0.0))
    exact = 0.5 * (1 - math.exp(-sigma * (far - near)))
    return float((out["rgb"] - exact).abs().max())


def check_guidance(n=20) -> int:
    mismatches = 0
    for seed in range(n):
        g = torch.Generator().manual_seed(seed)
        content = torch.randn(3, 4, 5, generator=g, dtype=torch.float64)
        refs_c = [torch.randn(3, 2, 5, generator=g, dtype=torch.float64) for _ in range(2)]
        refs_s = [torch.randn(3, 2, 5, generator=g, dtype=torch.float64) for _ in range(2)]
        cols = [torch.rand(3, 2, 3, generator=g, dtype=torch.float64) for _ in range(2)]
        got = build_guidance(content, refs_c, refs_s, cols).index_map
        stack = torch.cat(refs_c, dim=1)
        for i in range(3):
            for j in range(4):
                d = cosine_distance(content[i, j][None, None], stack)
                p, q = divmod(int(torch.argmin(d.reshape(-1))), stack.shape[1])
                mismatches += int((int(got[i, j, 0]), int(got[i, j, 1])) != (p, q))
    return mismatches


def check_registration(n=20) -> int:
    mismatches = 0
    bbox = np.array([[-1.0] * 3, [1.0] * 3])
    for seed in range(n):
        rng = np.random.default_rng(seed)
        m = 200
        pts = rng.uniform(-1, 1, (m, 3))
        dirs = rng.normal(size=(m, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        d = build_from_lift(pts, dirs, rng.uniform(0, 1, (m, 3)), np.ones(m, bool), bbox, 4, 3, 0.0)
        q = rng.uniform(-1, 1, (100, 3))
        qd = rng.normal(size=(100, 3))
        qd /= np.linalg.norm(qd, axis=1, keepdims=True)
        got = register(d, q, qd, theta=math.radians(60))
        found = dict(zip(got.ray_index.tolist(), got.entry_index.tolist()))
        qv = np.clip(np.floor(4 * (q + 1) / 2), 0, 3).astype(int)
        for i in range(100):
            best, best_d = None, np.inf
            for e in range(len(d)):
                if (d.voxel[e] == qv[i]).all() and d.dirs[e] @ qd[i] > math.cos(math.radians(60)):
                    dist = np.linalg.norm(d.points[e] - q[i])
                    if dist < best_d:
                        best, best_d = e, dist
            mismatches += int(found.get(i) != best)
    return mismatches


def check_extractor() -> bool:
    ext = ExtractorWeights.seeded(0).to(torch.float64)
    img = torch.rand(16, 16, 3, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    return extract(img, ext).data.shape == (4, 4, ext.out_channels)


CHECKS = (
    ("gradients vs finite differences", check_gradients, lambda v: v < 1e-4),
    ("factorization vs dense interpolation", check_factorization, lambda v: v < 1e-6),
    ("homogeneous medium vs closed form", check_homogeneous, lambda v: v < 1e-3),
    ("guidance vs brute-force argmin", check_guidance, lambda v: v == 0),
    ("registration vs brute-force scan", check_registration, lambda v: v == 0),
    ("extractor output shape", check_extractor, lambda v: v),
)


def run_all(emit=print) -> bool:
    ok = True
    for name, fn, passes in CHECKS:
        t0 = time.time()
        value = fn()
        good = bool(passes(value))
        ok &= good
        emit(f"{'PASS' if good else 'FAIL'}  {name}: {value} ({time.time() - t0:.2f}s)")
    return ok
