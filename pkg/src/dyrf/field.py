"""HexPlane 4D feature volume with a small color decoder."""

from __future__ import annotations

import math
import struct
from typing import Dict, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

X, Y, Z, T = 0, 1, 2, 3
AXIS_NAMES = "XYZT"

# plane order: spatial plane then its time-bearing partner, per pair-group
PAIRS = ((X, Y), (Z, T), (X, Z), (Y, T), (Y, Z), (X, T))
PAIR_NAMES = tuple(AXIS_NAMES[a] + AXIS_NAMES[b] for a, b in PAIRS)
GROUPS = ((0, 1), (2, 3), (4, 5))
SPATIAL_PLANES = (0, 2, 4)
TIME_PLANES = (1, 3, 5)

BRANCHES = ("density", "appearance")

_UV_INDEX = [list(PAIRS[i]) for i in SPATIAL_PLANES + TIME_PLANES]

CKPT_MAGIC = b"HXPL1\0"


def normalize_coords(points, frames, bbox, n_frames):
    """Map world points and frame indices to [0, 1]^4.

    Returns ``(coords, outside)``; coordinates outside the box are clamped and
    flagged.
    """
    bbox = torch.as_tensor(bbox, dtype=points.dtype, device=points.device)
    lo, hi = bbox[0], bbox[1]
    if torch.any(hi <= lo):
        raise ValueError("bbox must have positive extent on all axes")
    if n_frames < 1:
        raise ValueError("time range is empty")
    xyz = (points - lo) / (hi - lo)
    frames = torch.as_tensor(frames, dtype=points.dtype, device=points.device)
    frames = frames.expand(points.shape[:-1])
    if n_frames > 1:
        tt = frames / (n_frames - 1)
    else:
        tt = torch.zeros_like(frames)
    coords = torch.cat([xyz, tt[..., None]], dim=-1)
    eps = 1e-9
    outside = ((coords < -eps) | (coords > 1 + eps)).any(dim=-1)
    return coords.clamp(0.0, 1.0), outside


def sample_plane(grid, u, v):
    """Bilinear lookup of a ``(res_a, res_b, R)`` grid at ``u, v`` in [0, 1].

    Sample ``i`` along an axis lives at ``i / (res - 1)``.
    """
    grid = torch.as_tensor(grid)
    u = torch.as_tensor(u, dtype=grid.dtype)
    v = torch.as_tensor(v, dtype=grid.dtype)
    squeeze = u.dim() == 0
    u, v = u.reshape(-1), v.reshape(-1)
    if grid.dim() == 2:
        grid = grid[..., None]
    planes = grid.permute(2, 0, 1)[None]
    out = _grid_sample(planes, torch.stack([u, v], dim=-1)[None])[0]
    out = out.T
    return out[0] if squeeze else out


def _grid_sample(planes, uv):
    """``planes`` (P, R, Ha, Hb), ``uv`` (P, N, 2) in [0, 1] -> (P, R, N)."""
    # grid_sample's x indexes the last (width) dim, i.e. the plane's second axis
    grid = torch.stack([uv[..., 1], uv[..., 0]], dim=-1) * 2.0 - 1.0
    out = F.grid_sample(planes, grid[:, :, None, :], mode="bilinear",
                        padding_mode="border", align_corners=True)
    return out[..., 0]


class Decoder(nn.Module):
    """Two hidden rectifier layers, logistic output."""

    def __init__(self, feat_dim: int, hidden: int = 64, generator=None, dtype=torch.float32):
        super().__init__()
        self.feat_dim = feat_dim
        self.hidden = hidden
        dims = [(feat_dim + 3, hidden), (hidden, hidden), (hidden, 3)]
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for fan_in, fan_out in dims:
            bound = 1.0 / math.sqrt(fan_in)
            w = (torch.rand(fan_out, fan_in, generator=generator, dtype=dtype) * 2 - 1) * bound
            self.weights.append(nn.Parameter(w))
            self.biases.append(nn.Parameter(torch.zeros(fan_out, dtype=dtype)))

    def forward(self, features, view_dirs):
        h = torch.cat([features, view_dirs], dim=-1)
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = F.linear(h, w, b)
            if i < n - 1:
                h = torch.relu(h)
        return torch.sigmoid(h)


class HexPlaneField(nn.Module):
    """Density and appearance HexPlanes plus a color decoder.

    Each branch holds six planes ``(1, R, res_a, res_b)`` in ``PAIRS`` order and
    three ``(R, F)`` contraction matrices, one per pair-group. The density
    branch contracts to ``F = 1``.
    """

    def __init__(
        self,
        bbox,
        n_frames: int,
        spatial_res: int = 48,
        time_res: Optional[int] = None,
        density_rank: int = 8,
        app_rank: int = 8,
        app_dim: int = 24,
        hidden: int = 64,
        density_bias: float = -10.0,
        init_scale: float = 0.1,
        seed: int = 0,
        dtype=torch.float32,
    ):
        super().__init__()
        bbox = torch.as_tensor(bbox, dtype=torch.float64).reshape(2, 3)
        if torch.any(bbox[1] <= bbox[0]):
            raise ValueError("bbox must have positive extent on all axes")
        if n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        self.register_buffer("bbox", bbox.to(dtype))
        self.n_frames = int(n_frames)
        self.spatial_res = int(spatial_res)
        self.time_res = max(2, int(time_res if time_res is not None else n_frames))
        if self.spatial_res < 2:
            raise ValueError("grid resolution must be >= 2")
        self.density_rank = density_rank
        self.app_rank = app_rank
        self.app_dim = app_dim
        self.density_bias = float(density_bias)
        self.zero_viewdir = False
        self._density_frozen = False

        gen = torch.Generator().manual_seed(int(seed))
        self.density_planes = self._make_planes(density_rank, init_scale, gen, dtype)
        self.density_vectors = self._make_vectors(density_rank, 1, gen, dtype)
        self.app_planes = self._make_planes(app_rank, init_scale, gen, dtype)
        self.app_vectors = self._make_vectors(app_rank, app_dim, gen, dtype)
        self.decoder = Decoder(app_dim, hidden, generator=gen, dtype=dtype)

    def _res(self, axis):
        return self.time_res if axis == T else self.spatial_res

    def _make_planes(self, rank, scale, gen, dtype):
        planes = nn.ParameterList()
        for a, b in PAIRS:
            shape = (1, rank, self._res(a), self._res(b))
            init = (torch.rand(shape, generator=gen, dtype=dtype) * 2 - 1) * scale
            if b == T:
                # time-bearing planes start near one so spatial structure trains first
                init = init + 1.0
            planes.append(nn.Parameter(init))
        return planes

    def _make_vectors(self, rank, width, gen, dtype):
        vectors = nn.ParameterList()
        bound = 1.0 / math.sqrt(rank)
        for _ in GROUPS:
            vectors.append(nn.Parameter((torch.rand(rank, width, generator=gen, dtype=dtype) * 2 - 1) * bound))
        return vectors

    @property
    def density_frozen(self) -> bool:
        return self._density_frozen

    @density_frozen.setter
    def density_frozen(self, value: bool):
        self._density_frozen = bool(value)
        for p in self.density_parameters():
            p.requires_grad_(not value)

    def density_parameters(self):
        return list(self.density_planes) + list(self.density_vectors)

    def appearance_parameters(self):
        return list(self.app_planes) + list(self.app_vectors)

    def plane_parameters(self):
        return self.density_parameters() + self.appearance_parameters()

    def named_groups(self) -> Dict[str, torch.Tensor]:
        out = {}
        for branch, planes, vectors in (("density", self.density_planes, self.density_vectors),
                                        ("appearance", self.app_planes, self.app_vectors)):
            for name, p in zip(PAIR_NAMES, planes):
                out[f"{branch}.{name}"] = p
            for g, v in enumerate(vectors):
                out[f"{branch}.v{g + 1}"] = v
        for i, (w, b) in enumerate(zip(self.decoder.weights, self.decoder.biases)):
            out[f"decoder.w{i}"] = w
            out[f"decoder.b{i}"] = b
        return out

    @property
    def dtype(self):
        return self.bbox.dtype

    # -- queries -------------------------------------------------------------

    def _features(self, coords, planes, vectors):
        """Pre-activation feature sum at normalized coords (N, 4) -> (N, F)."""
        spatial = torch.cat([planes[i] for i in SPATIAL_PLANES], dim=0)
        temporal = torch.cat([planes[i] for i in TIME_PLANES], dim=0)
        uv = coords[:, _UV_INDEX].permute(1, 0, 2)  # (6, N, 2)
        s = _grid_sample(spatial, uv[:3])
        tm = _grid_sample(temporal, uv[3:])
        prod = s * tm  # (3, R, N)
        vec = torch.stack(list(vectors))  # (3, R, F)
        return torch.bmm(prod.transpose(1, 2), vec).sum(dim=0)

    def raw_density(self, points, frames):
        coords, outside = normalize_coords(points.reshape(-1, 3), frames.reshape(-1) if torch.is_tensor(frames) and frames.dim() else frames,
                                           self.bbox, self.n_frames)
        return self._features(coords, self.density_planes, self.density_vectors)[:, 0], outside

    def density(self, points, frames):
        """Volume density, ``softplus(sum + bias)``; zero outside the box."""
        shape = points.shape[:-1]
        raw, outside = self.raw_density(points, frames)
        sigma = F.softplus(raw + self.density_bias)
        sigma = torch.where(outside, torch.zeros_like(sigma), sigma)
        return sigma.reshape(shape)

    def appearance(self, points, frames):
        shape = points.shape[:-1]
        coords, outside = normalize_coords(points.reshape(-1, 3), frames.reshape(-1) if torch.is_tensor(frames) and frames.dim() else frames,
                                           self.bbox, self.n_frames)
        feat = self._features(coords, self.app_planes, self.app_vectors)
        feat = torch.where(outside[:, None], torch.zeros_like(feat), feat)
        return feat.reshape(*shape, self.app_dim)

    def query(self, points, frames, branch: str = "density"):
        if branch == "density":
            return self.density(points, frames)
        if branch == "appearance":
            return self.appearance(points, frames)
        raise ValueError(f"unknown branch {branch!r}")

    def decode_color(self, features, view_dirs):
        if not torch.isfinite(features).all():
            raise ValueError("non-finite appearance features")
        if self.zero_viewdir:
            view_dirs = torch.zeros_like(view_dirs)
        return self.decoder(features, view_dirs)

    def color(self, points, frames, view_dirs):
        return self.decode_color(self.appearance(points, frames), view_dirs)


def decode_color(field: HexPlaneField, features, view_dir):
    return field.decode_color(features, view_dir)


def query(field: HexPlaneField, points, frames, branch="density"):
    return field.query(points, frames, branch)


def accumulate_gradients(field: HexPlaneField, outputs, upstream) -> Dict[str, torch.Tensor]:
    """Back-propagate ``upstream`` through recorded ``outputs``.

    Gradients are summed into ``.grad`` of every parameter and returned as a
    name -> buffer mapping (zeros where no gradient flowed).
    """
    if not isinstance(outputs, (list, tuple)):
        outputs, upstream = [outputs], [upstream]
    if len(outputs) != len(upstream):
        raise ValueError("outputs and upstream gradients differ in count")
    for o, u in zip(outputs, upstream):
        if o.shape != u.shape:
            raise ValueError(f"upstream shape {tuple(u.shape)} does not match recorded output {tuple(o.shape)}")
        if o.grad_fn is None and not o.requires_grad:
            raise ValueError("output was not recorded with gradients")
    torch.autograd.backward(list(outputs), list(upstream))
    return gradient_buffers(field)


def gradient_buffers(field: HexPlaneField) -> Dict[str, torch.Tensor]:
    out = {}
    for name, p in field.named_groups().items():
        out[name] = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
    return out


# -- checkpoint ---------------------------------------------------------------

_KIND_PLANE, _KIND_VECTOR, _KIND_DECODER, _KIND_META = 0, 1, 2, 3
_NONE = 0xFFFFFFFF


def _descriptors(field: HexPlaneField):
    desc = []
    for b, (planes, vectors) in enumerate(((field.density_planes, field.density_vectors),
                                           (field.app_planes, field.app_vectors))):
        for pi, p in enumerate(planes):
            _, r, ra, rb = p.shape
            desc.append(((_KIND_PLANE, b, pi, ra, rb, r, 0), p))
        for g, v in enumerate(vectors):
            r, f = v.shape
            desc.append(((_KIND_VECTOR, b, g, r, f, 0, 0), v))
    for i, (w, bias) in enumerate(zip(field.decoder.weights, field.decoder.biases)):
        desc.append(((_KIND_DECODER, 2, 2 * i, w.shape[0], w.shape[1], 0, 0), w))
        desc.append(((_KIND_DECODER, 2, 2 * i + 1, bias.shape[0], 1, 0, 0), bias))
    return desc


def save_checkpoint(field: HexPlaneField, path):
    desc = _descriptors(field)
    meta = torch.cat([field.bbox.reshape(-1).float(), torch.tensor(
        [field.n_frames, field.time_res, field.spatial_res, field.density_bias,
         float(field.density_frozen), float(field.zero_viewdir), field.decoder.hidden],
        dtype=torch.float32)])
    header = [struct.pack("<I", len(desc) + 1)]
    header.append(struct.pack("<7I", _KIND_META, _NONE, _NONE, meta.numel(), 1, 0, 0))
    for d, _ in desc:
        header.append(struct.pack("<7I", *d))
    body = [meta.numpy().astype("<f4").tobytes()]
    for _, t in desc:
        body.append(t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(b"".join(header))
        fh.write(b"".join(body))


def load_checkpoint(path, dtype=torch.float32) -> HexPlaneField:
    import numpy as np

    with open(path, "rb") as fh:
        data = fh.read()
    if data[:6] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a HexPlane checkpoint")
    off = 6
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    descs = []
    for _ in range(n):
        descs.append(struct.unpack_from("<7I", data, off))
        off += 28

    def take(count):
        nonlocal off
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).copy()
        off += 4 * count
        return torch.from_numpy(arr)

    tensors = []
    for d in descs:
        kind = d[0]
        if kind == _KIND_PLANE:
            tensors.append(take(d[3] * d[4] * d[5]).reshape(1, d[5], d[3], d[4]))
        else:
            tensors.append(take(d[3] * d[4]))
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    meta = tensors[0]
    bbox = meta[:6].reshape(2, 3)
    n_frames, time_res, spatial_res, bias, frozen, zero_vd, hidden = meta[6:13].tolist()
    d_rank = descs[1][5]
    a_desc = [d for d in descs if d[0] == _KIND_PLANE and d[1] == 1][0]
    a_vec = [d for d in descs if d[0] == _KIND_VECTOR and d[1] == 1][0]
    field = HexPlaneField(bbox, int(n_frames), spatial_res=int(spatial_res), time_res=int(time_res),
                          density_rank=d_rank, app_rank=a_desc[5], app_dim=a_vec[4],
                          hidden=int(hidden), density_bias=bias, dtype=torch.float32)
    field.bbox.copy_(bbox)
    params = [p for _, p in _descriptors(field)]
    with torch.no_grad():
        for p, t in zip(params, tensors[1:]):
            if p.numel() != t.numel():
                raise ValueError(f"{path}: tensor of {t.numel()} values, expected {tuple(p.shape)}")
            p.copy_(t.reshape(p.shape))
    field.density_frozen = bool(frozen)
    field.zero_viewdir = bool(zero_vd)
    return field.to(dtype)


def dense_tensor(field: HexPlaneField, branch: str = "appearance"):
    """Materialize the full ``(X, Y, Z, T, F)`` pre-activation feature volume."""
    planes = field.density_planes if branch == "density" else field.app_planes
    vectors = field.density_vectors if branch == "density" else field.app_vectors
    m = [p[0] for p in planes]  # (R, a, b)
    vol = torch.einsum("rxy,rzt,rf->xyztf", m[0], m[1], vectors[0])
    vol = vol + torch.einsum("rxz,ryt,rf->xyztf", m[2], m[3], vectors[1])
    vol = vol + torch.einsum("ryz,rxt,rf->xyztf", m[4], m[5], vectors[2])
    return vol
