"""Convolutional feature extractor, cosine distance and area downsampling."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

WEIGHTS_MAGIC = b"CNNW1\0"
NORM_EPS = 1e-12

_CONV, _RELU, _POOL = 0, 1, 2


@dataclass
class Layer:
    kind: str  # "conv", "relu" or "pool"
    weight: Optional[torch.Tensor] = None  # (out, in, 3, 3)
    bias: Optional[torch.Tensor] = None


class ExtractorWeights:
    """An ordered stack of 3x3 convolutions, rectifiers and 2x average pools."""

    def __init__(self, layers: Sequence[Layer], ident: str = ""):
        self.layers = list(layers)
        self.ident = ident or self.digest()

    @property
    def stride(self) -> int:
        return 2 ** sum(1 for l in self.layers if l.kind == "pool")

    @property
    def out_channels(self) -> int:
        return [l for l in self.layers if l.kind == "conv"][-1].weight.shape[0]

    def digest(self) -> str:
        h = hashlib.sha1()
        for l in self.layers:
            h.update(l.kind.encode())
            if l.kind == "conv":
                h.update(l.weight.detach().to(torch.float32).numpy().tobytes())
                h.update(l.bias.detach().to(torch.float32).numpy().tobytes())
        return h.hexdigest()[:16]

    def to(self, dtype) -> "ExtractorWeights":
        layers = [Layer(l.kind, None if l.weight is None else l.weight.to(dtype),
                        None if l.bias is None else l.bias.to(dtype)) for l in self.layers]
        return ExtractorWeights(layers, self.ident)

    @classmethod
    def seeded(cls, seed: int = 0, channels=(16, 32, 64), in_channels: int = 3) -> "ExtractorWeights":
        """Default stack: stages of conv-relu-conv-relu, 2x pooled between stages, orthogonal init."""
        gen = torch.Generator().manual_seed(seed)
        layers = []
        c_in = in_channels
        for stage, c_out in enumerate(channels):
            if stage:
                layers.append(Layer("pool"))
            for _ in range(2):
                w = torch.empty(c_out, c_in * 9)
                _orthogonal_(w, gen)
                # unit-norm rows; gain sqrt(2) offsets the rectifier
                w = w.reshape(c_out, c_in, 3, 3) * math.sqrt(2.0)
                layers += [Layer("conv", w, torch.zeros(c_out)), Layer("relu")]
                c_in = c_out
        return cls(layers, ident=f"seeded-{seed}-" + "-".join(map(str, channels)))

    def save(self, path):
        desc, blobs = [], []
        for l in self.layers:
            if l.kind == "conv":
                desc.append(struct.pack("<3I", _CONV, l.weight.shape[1], l.weight.shape[0]))
                blobs.append(l.weight.detach().to(torch.float32).numpy().astype("<f4").tobytes())
                blobs.append(l.bias.detach().to(torch.float32).numpy().astype("<f4").tobytes())
            else:
                desc.append(struct.pack("<3I", _RELU if l.kind == "relu" else _POOL, 0, 0))
        with open(path, "wb") as fh:
            fh.write(WEIGHTS_MAGIC)
            fh.write(struct.pack("<I", len(desc)))
            fh.write(b"".join(desc))
            fh.write(b"".join(blobs))

    @classmethod
    def load(cls, path) -> "ExtractorWeights":
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:6] != WEIGHTS_MAGIC:
            raise ValueError(f"{path}: not a CNNW1 weight file")
        (n,) = struct.unpack_from("<I", data, 6)
        off = 10
        desc = [struct.unpack_from("<3I", data, off + 12 * i) for i in range(n)]
        off += 12 * n
        layers = []
        for kind, c_in, c_out in desc:
            if kind == _CONV:
                cnt = c_out * c_in * 9
                w = np.frombuffer(data, "<f4", cnt, off).reshape(c_out, c_in, 3, 3)
                off += 4 * cnt
                b = np.frombuffer(data, "<f4", c_out, off)
                off += 4 * c_out
                layers.append(Layer("conv", torch.tensor(w.copy()), torch.tensor(b.copy())))
            elif kind == _RELU:
                layers.append(Layer("relu"))
            elif kind == _POOL:
                layers.append(Layer("pool"))
            else:
                raise ValueError(f"{path}: unknown layer type {kind}")
        if off != len(data):
            raise ValueError(f"{path}: trailing bytes")
        return cls(layers)


def _orthogonal_(w: torch.Tensor, gen: torch.Generator):
    rows, cols = w.shape
    a = torch.randn(max(rows, cols), min(rows, cols), generator=gen, dtype=torch.float64)
    q, r = torch.linalg.qr(a)
    q = q * torch.sign(torch.diagonal(r))
    if rows < cols:
        q = q.T
    w.copy_(q[:rows, :cols].to(w.dtype))
    return w


@dataclass
class FeatureMap:
    data: torch.Tensor  # (h, w, c)
    source: str = ""
    extractor: str = ""

    @property
    def shape(self):
        return tuple(self.data.shape)


def _pad_to_stride(x: torch.Tensor, stride: int):
    h, w = x.shape[-2:]
    ph, pw = (-h) % stride, (-w) % stride
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return x


def extract(image, weights: ExtractorWeights, source: str = "") -> FeatureMap:
    """Run the extractor on an (H, W, 3) image; differentiable in the image."""
    img = image.rgb if hasattr(image, "rgb") else image
    if not torch.isfinite(img).all():
        raise ValueError("non-finite pixels")
    x = img.permute(2, 0, 1)[None]
    x = _pad_to_stride(x, weights.stride)
    for layer in weights.layers:
        if layer.kind == "conv":
            x = F.conv2d(x, layer.weight.to(x.dtype), layer.bias.to(x.dtype), padding=1)
        elif layer.kind == "relu":
            x = torch.relu(x)
        else:
            x = F.avg_pool2d(x, 2)
    return FeatureMap(x[0].permute(1, 2, 0), source, weights.ident)


def extractor_backward(image, weights: ExtractorWeights, upstream) -> torch.Tensor:
    """Gradient of ``<extract(image), upstream>`` with respect to the image pixels."""
    img = (image.rgb if hasattr(image, "rgb") else image).detach().clone().requires_grad_(True)
    with torch.enable_grad():
        feat = extract(img, weights).data
        if feat.shape != upstream.shape:
            raise ValueError(f"upstream shape {tuple(upstream.shape)} != feature shape {tuple(feat.shape)}")
        (grad,) = torch.autograd.grad(feat, img, upstream.to(feat.dtype))
    return grad


def cosine_distance(f, g):
    """``1 - cos(f, g)`` along the last axis; 0 where either vector is ~zero."""
    f, g = torch.as_tensor(f), torch.as_tensor(g)
    nf = f.norm(dim=-1)
    ng = g.norm(dim=-1)
    degenerate = (nf < NORM_EPS) | (ng < NORM_EPS)
    denom = torch.where(degenerate, torch.ones_like(nf), nf * ng)
    d = 1.0 - (f * g).sum(dim=-1) / denom
    return torch.where(degenerate, torch.zeros_like(d), d)


def area_matrix(n_in: int, n_out: int, dtype=torch.float64) -> torch.Tensor:
    """(n_out, n_in) exact box-filter weights: each output cell averages its footprint."""
    edges_out = np.arange(n_out + 1) * (n_in / n_out)
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        a, b = edges_out[i], edges_out[i + 1]
        lo, hi = int(np.floor(a)), int(np.ceil(b))
        for j in range(lo, min(hi, n_in)):
            m[i, j] = max(0.0, min(b, j + 1) - max(a, j))
        m[i] /= b - a
    return torch.tensor(m, dtype=dtype)


def downsample(image, target: Tuple[int, int]):
    """Area-average resample of an (H, W, C) image to ``target`` (h, w)."""
    img = image.rgb if hasattr(image, "rgb") else image
    h, w = target
    if h <= 0 or w <= 0:
        raise ValueError("target size must be positive")
    if h > img.shape[0] or w > img.shape[1]:
        raise ValueError("target must not exceed the source size")
    if img.shape[0] % h == 0 and img.shape[1] % w == 0:
        x = F.avg_pool2d(img.permute(2, 0, 1)[None], (img.shape[0] // h, img.shape[1] // w))
        return x[0].permute(1, 2, 0)
    mh = area_matrix(img.shape[0], h, img.dtype)
    mw = area_matrix(img.shape[1], w, img.dtype)
    return torch.einsum("ih,hwc,jw->ijc", mh, img, mw)
