"""Shared oracles for the test-suite (independent of the package internals)."""

import numpy as np
import torch

from dyrf.field import HexPlaneField


def tiny_field(seed=0, res=4, n_frames=3, rank=2, feat=3, hidden=4, bias=0.0, scale=1.0, time_res=None):
    return HexPlaneField([[-1.0] * 3, [1.0] * 3], n_frames, spatial_res=res, time_res=time_res, density_rank=rank,
                         app_rank=rank, app_dim=feat, hidden=hidden, density_bias=bias, init_scale=scale,
                         seed=seed, dtype=torch.float64)


def central_difference(loss_fn, param, index, h=1e-6):
    flat = param.data.view(-1)
    old = flat[index].item()
    with torch.no_grad():
        flat[index] = old + h
        up = float(loss_fn())
        flat[index] = old - h
        down = float(loss_fn())
        flat[index] = old
    return (up - down) / (2 * h)


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_max_error(loss_fn, params, n_coords=4, h=1e-5, seed=0, floor=1e-6, max_skip_fraction=0.25):
    """Worst relative error of autograd against central differences on random coordinates.

    A coordinate whose stencil straddles a ReLU kink has no derivative for the
    difference quotient to approximate; it shows up as the ``h`` and ``h/2``
    quotients disagreeing, and another coordinate is drawn instead. Too many
    such draws fail the check.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    for p, g in zip(params, grads):
        want = min(n_coords, p.numel())
        order = rng.permutation(p.numel())
        done = 0
        for i in order:
            if done == want:
                break
            fd = central_difference(lambda: loss_fn().detach(), p, int(i), h)
            fd_half = central_difference(lambda: loss_fn().detach(), p, int(i), h / 2)
            if rel_err(fd, fd_half, 1e-4) > 1e-3:
                skipped += 1
                continue
            worst = max(worst, rel_err(g.view(-1)[int(i)].item(), fd, floor))
            done += 1
        checked += done
    if skipped > max_skip_fraction * max(checked, 1):
        raise AssertionError(f"{skipped} kink-straddling coordinates for {checked} checked")
    return worst


def naive_bilinear(grid, u, v):
    """grid (A, B, R) numpy; sample i sits at i/(res-1)."""
    a, b = grid.shape[:2]
    x, y = u * (a - 1), v * (b - 1)
    i0, j0 = min(int(np.floor(x)), a - 2), min(int(np.floor(y)), b - 2)
    fx, fy = x - i0, y - j0
    return (grid[i0, j0] * (1 - fx) * (1 - fy) + grid[i0 + 1, j0] * fx * (1 - fy)
            + grid[i0, j0 + 1] * (1 - fx) * fy + grid[i0 + 1, j0 + 1] * fx * fy)


def brute_dense(field, branch="appearance"):
    """Dense (X, Y, Z, T, F) volume by explicit loops over ranks and outer products."""
    planes = field.density_planes if branch == "density" else field.app_planes
    vectors = field.density_vectors if branch == "density" else field.app_vectors
    m = [p.detach()[0].numpy() for p in planes]
    v = [x.detach().numpy() for x in vectors]
    rx = m[0].shape[1]
    rt = m[1].shape[2]
    f = v[0].shape[1]
    vol = np.zeros((rx, rx, rx, rt, f))
    for r in range(m[0].shape[0]):
        vol += np.einsum("xy,zt,f->xyztf", m[0][r], m[1][r], v[0][r])
        vol += np.einsum("xz,yt,f->xyztf", m[2][r], m[3][r], v[1][r])
        vol += np.einsum("yz,xt,f->xyztf", m[4][r], m[5][r], v[2][r])
    return vol


def quadrilinear(vol, c):
    """Interpolate vol (X, Y, Z, T, F) at normalized coords c (4,) with endpoint convention."""
    res = np.array(vol.shape[:4])
    x = np.asarray(c) * (res - 1)
    i0 = np.minimum(np.floor(x).astype(int), res - 2)
    w = x - i0
    out = np.zeros(vol.shape[4])
    for corner in range(16):
        bits = [(corner >> k) & 1 for k in range(4)]
        wt = np.prod([w[k] if bits[k] else 1 - w[k] for k in range(4)])
        out += wt * vol[tuple(i0[k] + bits[k] for k in range(4))]
    return out


class AnalyticField(torch.nn.Module):
    """Density and color given as python callables of world points; no bbox."""

    bbox = None

    def __init__(self, sigma_fn, color=(0.5, 0.5, 0.5)):
        super().__init__()
        self.sigma_fn = sigma_fn
        self.rgb = torch.tensor(color, dtype=torch.float64)

    @property
    def dtype(self):
        return torch.float64

    def density(self, points, frames):
        return self.sigma_fn(points)

    def color(self, points, frames, dirs):
        return self.rgb.expand(points.shape[:-1] + (3,))
