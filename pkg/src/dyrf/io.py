"""On-disk formats: 8-bit PNG, raw f32 images (IMGF1) and flow fields (FLOW1)."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMGF_MAGIC = b"IMGF1\0"
FLOW_MAGIC = b"FLOW1\0"


def _as_numpy(img) -> np.ndarray:
    if torch.is_tensor(img):
        img = img.detach().cpu().numpy()
    return np.asarray(img)


def quantize(img) -> np.ndarray:
    return np.round(255.0 * np.clip(_as_numpy(img), 0.0, 1.0)).astype(np.uint8)


def save_png(path, img):
    arr = quantize(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path, dtype=torch.float32) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return torch.tensor(arr, dtype=dtype)


def save_imgf(path, img):
    arr = _as_numpy(img).astype("<f4")
    if arr.ndim == 2:
        arr = arr[..., None]
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(IMGF_MAGIC)
        fh.write(struct.pack("<3I", w, h, c))
        fh.write(arr.tobytes())


def load_imgf(path, dtype=torch.float32) -> torch.Tensor:
    data = Path(path).read_bytes()
    if data[:6] != IMGF_MAGIC:
        raise ValueError(f"{path}: not an IMGF1 file")
    w, h, c = struct.unpack_from("<3I", data, 6)
    arr = np.frombuffer(data, dtype="<f4", count=w * h * c, offset=18).reshape(h, w, c)
    if 18 + 4 * w * h * c != len(data):
        raise ValueError(f"{path}: size mismatch")
    return torch.tensor(arr.copy(), dtype=dtype)


def save_flow(path, flow, valid):
    flow = _as_numpy(flow).astype("<f4")
    valid = _as_numpy(valid).astype(np.uint8)
    h, w, _ = flow.shape
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<2I", w, h))
        fh.write(flow.tobytes())
        fh.write(valid.tobytes())


def load_flow(path):
    data = Path(path).read_bytes()
    if data[:6] != FLOW_MAGIC:
        raise ValueError(f"{path}: not a FLOW1 file")
    w, h = struct.unpack_from("<2I", data, 6)
    off = 14
    flow = np.frombuffer(data, dtype="<f4", count=w * h * 2, offset=off).reshape(h, w, 2).copy()
    off += 8 * w * h
    valid = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=off).reshape(h, w).astype(bool)
    if off + w * h != len(data):
        raise ValueError(f"{path}: size mismatch")
    return flow, valid
