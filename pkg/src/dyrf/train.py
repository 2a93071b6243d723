"""Photoreal pretraining, view-direction finetune and the stylization schedule."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from .config import StyleConfig
from .coarse import GuidanceMaps, build_guidance, coarse_loss
from .features import ExtractorWeights, FeatureMap, downsample, extract
from .field import HexPlaneField, save_checkpoint
from .registry import TemporalReferenceDictionary, build_dictionary, fine_loss, register
from .render import (Rays, deferred_backprop, generate_rays, image_loss_from, photometric_loss, render_cached,
                     render_rays, tv_loss)

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


def make_optimizer(field: HexPlaneField, config: StyleConfig, appearance_only: bool = False,
                   lr_grid: Optional[float] = None):
    """Adam with the grid learning rate on planes/vectors and a smaller one on the decoder."""
    grids = field.appearance_parameters() if appearance_only else field.plane_parameters()
    groups = [
        {"params": grids, "lr": config.lr_grid if lr_grid is None else lr_grid},
        {"params": list(field.decoder.parameters()), "lr": config.lr_decoder},
    ]
    return torch.optim.Adam(groups, betas=(config.beta1, config.beta2), eps=config.adam_eps)


@dataclass
class RayTable:
    """Every training ray of a dataset with its frame, camera and target color."""

    rays: Rays
    frames: torch.Tensor
    cameras: torch.Tensor
    colors: torch.Tensor

    def __len__(self):
        return len(self.rays)

    def __getitem__(self, idx) -> "RayTable":
        return RayTable(self.rays[idx], self.frames[idx], self.cameras[idx], self.colors[idx])


def build_ray_table(dataset, dtype=torch.float32) -> RayTable:
    rays, frames, cams, colors = [], [], [], []
    for ci, cam in enumerate(dataset.cameras):
        cam_rays = generate_rays(cam, dtype=dtype)
        for t in range(dataset.n_frames):
            rays.append(cam_rays)
            n = len(cam_rays)
            frames.append(torch.full((n,), float(t), dtype=dtype))
            cams.append(torch.full((n,), ci, dtype=torch.long))
            colors.append(dataset.images[ci, t].reshape(-1, 3).to(dtype))
    return RayTable(Rays.cat(rays), torch.cat(frames), torch.cat(cams), torch.cat(colors))


def split_holdout(n: int, fraction: float, seed: int):
    gen = torch.Generator().manual_seed(seed + 7)
    perm = torch.randperm(n, generator=gen)
    n_hold = int(round(n * fraction))
    return perm[n_hold:], perm[:n_hold]


def psnr(pred, target) -> float:
    mse = float(((pred - target) ** 2).mean())
    return float("inf") if mse == 0 else -10.0 * math.log10(mse)


def evaluate_rays(field, table: RayTable, n_samples: int, background, chunk: int = 8192):
    out = []
    with torch.no_grad():
        for i in range(0, len(table), chunk):
            sub = table[i:i + chunk]
            out.append(render_rays(field, sub.rays, sub.frames, n_samples, background=background)["rgb"])
    return torch.cat(out)


def new_field(dataset, config: StyleConfig, dtype=torch.float32) -> HexPlaneField:
    return HexPlaneField(dataset.spec.bbox, dataset.n_frames, spatial_res=config.spatial_res,
                         density_rank=config.density_rank, app_rank=config.app_rank, app_dim=config.app_dim,
                         density_bias=config.density_bias, seed=config.seed, dtype=dtype)


def _photometric_steps(field, table: RayTable, config: StyleConfig, steps: int, optimizer, gen,
                       background, history: List[float], tv_branches=("density", "appearance")):
    n = len(table)
    for step in range(steps):
        idx = torch.randint(0, n, (config.pretrain_batch,), generator=gen)
        batch = table[idx]
        out = render_rays(field, batch.rays, batch.frames, config.pretrain_samples, stratified=True,
                          generator=gen, background=background, weight_threshold=config.weight_threshold)
        # summed over the batch, so lambda_tv keeps its weight relative to a whole batch of rays
        photo = photometric_loss(out["rgb"], batch.colors)
        loss = photo + config.lambda_tv * tv_loss(field, tv_branches)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        history.append(loss.item() / len(batch))
    return history


def pretrain_photoreal(dataset, config: StyleConfig, history: Optional[List[float]] = None,
                       dtype=torch.float32):
    """Fit a photoreal field to every camera and frame of ``dataset``.

    Returns ``(field, report)`` where the report holds the held-out PSNR.
    """
    if len(dataset.cameras) < 1 or dataset.n_frames < 1:
        raise ValueError("dataset needs at least one camera and one frame")
    field = new_field(dataset, config, dtype)
    table = build_ray_table(dataset, dtype)
    train_idx, hold_idx = split_holdout(len(table), config.holdout_fraction, config.seed)
    train, hold = table[train_idx], table[hold_idx]
    gen = torch.Generator().manual_seed(config.seed)
    opt = make_optimizer(field, config, lr_grid=config.pretrain_lr_grid)
    history = [] if history is None else history
    background = dataset.spec.background
    _photometric_steps(field, train, config, config.pretrain_steps, opt, gen, background, history)
    report = {"steps": config.pretrain_steps}
    if len(hold):
        report["holdout_psnr"] = psnr(evaluate_rays(field, hold, config.n_samples, background), hold.colors)
    log.info("pretrain done: %s", report)
    return field, report


def finetune_viewdir_zero(field: HexPlaneField, dataset, config: StyleConfig, steps: Optional[int] = None,
                          history: Optional[List[float]] = None):
    """Switch the decoder to zero view directions and refit for ``steps`` iterations."""
    steps = config.finetune_steps if steps is None else steps
    field.zero_viewdir = True
    if steps == 0:
        return field
    table = build_ray_table(dataset, field.dtype)
    train_idx, _ = split_holdout(len(table), config.holdout_fraction, config.seed)
    gen = torch.Generator().manual_seed(config.seed + 1)
    opt = make_optimizer(field, config)
    _photometric_steps(field, table[train_idx], config, steps, opt, gen, dataset.spec.background,
                       [] if history is None else history)
    return field


def clone_for_stylization(field: HexPlaneField) -> HexPlaneField:
    styl = copy.deepcopy(field)
    styl.density_frozen = True
    styl.zero_viewdir = True
    for p in field.parameters():
        p.requires_grad_(False)
    return styl


# -- stylization ---------------------------------------------------------------

STAGES = ("pretrain", "finetune", "keyframe", "full")


@dataclass
class TrainState:
    photoreal: HexPlaneField
    stylized: HexPlaneField
    optimizer: torch.optim.Optimizer
    step: int = 0
    stage: str = "keyframe"
    history: List[Dict[str, float]] = dc_field(default_factory=list)
    skipped: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")


def new_state(photoreal: HexPlaneField, config: StyleConfig) -> TrainState:
    styl = clone_for_stylization(photoreal)
    return TrainState(photoreal, styl, make_optimizer(styl, config, appearance_only=True))


class StyleContext:
    """Everything a stylization step reads but never writes, built lazily and cached.

    Holds the frozen-density sample caches and content renders of the photoreal
    field per (camera, frame), the keyframe guidance stacks, the per-frame
    reference dictionaries and the registered pseudo-rays.
    """

    def __init__(self, photoreal: HexPlaneField, cameras, pseudo, extractor: ExtractorWeights,
                 config: StyleConfig, background=(1.0, 1.0, 1.0)):
        if not 0 <= config.reference_camera < len(cameras):
            raise ValueError("reference camera outside the camera list")
        self.field = photoreal
        self.cameras = list(cameras)
        self.pseudo = pseudo
        self.config = config
        self.background = background
        self.extractor = extractor.to(photoreal.dtype)
        self.ref_camera = self.cameras[config.reference_camera]
        self._renders: Dict[tuple, dict] = {}
        self._content: Dict[tuple, FeatureMap] = {}
        self._guidance: Dict[tuple, GuidanceMaps] = {}
        self._dicts: Dict[int, TemporalReferenceDictionary] = {}
        self._registered: Dict[int, list] = {}
        self._stack = None

    @property
    def n_frames(self):
        return self.pseudo.n_frames

    def render(self, cam: int, t: int) -> dict:
        """Photoreal render of (camera, frame) with its sample cache."""
        key = (cam, t)
        if key not in self._renders:
            rays = generate_rays(self.cameras[cam], dtype=self.field.dtype)
            with torch.no_grad():
                out = render_rays(self.field, rays, float(t), self.config.n_samples, background=self.background,
                                  weight_threshold=self.config.weight_threshold, return_cache=True)
            self._renders[key] = out
        return self._renders[key]

    def content_image(self, cam: int, t: int):
        c = self.cameras[cam]
        return self.render(cam, t)["rgb"].reshape(c.height, c.width, 3)

    def content_features(self, cam: int, t: int) -> FeatureMap:
        if (cam, t) not in self._content:
            self._content[(cam, t)] = extract(self.content_image(cam, t), self.extractor, f"content:{cam}:{t}")
        return self._content[(cam, t)]

    def keyframe_stack(self):
        if self._stack is None:
            rc = self.config.reference_camera
            content, style, colors = [], [], []
            for k in self.pseudo.keyframes:
                content.append(self.content_features(rc, k))
                s = self.pseudo.frames[k].to(self.field.dtype)
                feat = extract(s, self.extractor, f"pseudo:{k}")
                style.append(feat)
                colors.append(downsample(s, feat.data.shape[:2]))
            self._stack = (content, style, colors)
        return self._stack

    def guidance(self, cam: int, t: int) -> GuidanceMaps:
        if (cam, t) not in self._guidance:
            content, style, colors = self.keyframe_stack()
            self._guidance[(cam, t)] = build_guidance(self.content_features(cam, t), content, style, colors)
        return self._guidance[(cam, t)]

    def dictionary(self, t: int) -> TemporalReferenceDictionary:
        if t not in self._dicts:
            out = self.render(self.config.reference_camera, t)
            cfg = self.config
            self._dicts[t] = build_dictionary(out["depth"], out["alpha"], self.ref_camera, self.pseudo.frames[t], t,
                                              self.field.bbox.detach().cpu().numpy(), cfg.voxel_res,
                                              cfg.bucket_cap, cfg.alpha_min)
        return self._dicts[t]

    def registered(self, t: int):
        """Pseudo-rays of every training camera at frame ``t``: list of (camera, PseudoRaySet)."""
        if t not in self._registered:
            d = self.dictionary(t)
            out = []
            for cam, camera in enumerate(self.cameras):
                rays = generate_rays(camera, dtype=torch.float64)
                r = self.render(cam, t)
                depth = r["depth"].detach().double()
                valid = (r["alpha"] >= self.config.alpha_min).numpy()
                pts = (rays.origins + depth[:, None] * rays.dirs).numpy()
                out.append((cam, register(d, pts, rays.dirs.numpy(), valid, self.config.theta)))
            self._registered[t] = out
        return self._registered[t]


def _sample_pseudo_rays(ctx: StyleContext, t: int, batch: int, gen: torch.Generator):
    """Uniform sample (without replacement) of the registered pseudo-rays at ``t``."""
    sets = ctx.registered(t)
    sizes = [len(s) for _, s in sets]
    total = sum(sizes)
    if total == 0:
        return []
    pick = torch.randperm(total, generator=gen)[:batch].sort().values.numpy()
    out, start = [], 0
    for (cam, s), n in zip(sets, sizes):
        sel = pick[(pick >= start) & (pick < start + n)] - start
        if sel.size:
            out.append((cam, s.ray_index[sel], s.colors[sel]))
        start += n
    return out


def fine_term(field: HexPlaneField, ctx: StyleContext, t: int, batch: int, gen: torch.Generator):
    """Fine loss of ``field`` on a sampled batch of pseudo-rays at frame ``t``."""
    preds, targets = [], []
    for cam, rays, colors in _sample_pseudo_rays(ctx, t, batch, gen):
        cache = ctx.render(cam, t)["cache"].subset(torch.as_tensor(rays))
        preds.append(render_cached(field, cache, ctx.background))
        targets.append(torch.as_tensor(colors))
    if not preds:
        return torch.zeros((), dtype=field.dtype, requires_grad=True) * 1.0
    return fine_loss(torch.cat(preds), torch.cat(targets))


def coarse_term(field: HexPlaneField, ctx: StyleContext, cam: int, t: int, scale: float = 1.0):
    """Coarse loss through deferred back-propagation; gradients times ``scale`` land in ``.grad``."""
    cfg = ctx.config
    guidance = ctx.guidance(cam, t)
    content = ctx.content_features(cam, t)
    cache = ctx.render(cam, t)["cache"]

    def loss_fn(image):
        return coarse_loss(image, guidance, content, ctx.extractor, cfg.lambda_feat, cfg.lambda_color,
                           cfg.lambda_content)

    def renderer(idx):
        return render_cached(field, cache.subset(idx), ctx.background)

    return deferred_backprop(field, ctx.cameras[cam], t, image_loss_from(loss_fn), (cfg.patch, cfg.patch),
                             renderer=renderer, scale=scale)


def stylize_step(state: TrainState, ctx: StyleContext, t: int, cam: int, config: StyleConfig,
                 gen: torch.Generator) -> Dict[str, float]:
    """One Adam update of the stylized appearance on frame ``t`` seen from camera ``cam``."""
    field = state.stylized
    if not field.density_frozen:
        raise RuntimeError("stylized field must have frozen density")
    state.optimizer.zero_grad(set_to_none=True)
    if config.lambda_coarse > 0:
        coarse = float(coarse_term(field, ctx, cam, t, scale=config.lambda_coarse))
    else:
        coarse = 0.0
    fine = fine_term(field, ctx, t, config.fine_batch, gen)
    tv = tv_loss(field, ("appearance",))
    (config.lambda_fine * fine + config.lambda_tv * tv).backward()
    fine, tv = fine.item(), tv.item()
    total = config.lambda_coarse * coarse + config.lambda_fine * fine + config.lambda_tv * tv
    grads = [p.grad for g in state.optimizer.param_groups for p in g["params"] if p.grad is not None]
    if math.isfinite(total) and all(torch.isfinite(g).all() for g in grads):
        state.optimizer.step()
    else:
        state.skipped += 1
        log.warning("non-finite gradient at step %d; update skipped (%d so far)", state.step, state.skipped)
    rec = {"step": state.step, "coarse": coarse, "fine": fine, "tv": tv, "total": total}
    state.history.append(rec)
    state.step += 1
    return rec


def schedule(frames, n_cameras: int, steps: int):
    """(frame, camera) per step: frames round-robin, each frame cycling its own camera counter."""
    frames = list(frames)
    out = []
    for s in range(steps):
        t = frames[s % len(frames)]
        cam = (s // len(frames)) % n_cameras
        out.append((t, cam))
    return out


def run_schedule(state: TrainState, ctx: StyleContext, config: StyleConfig, run_dir=None, on_step=None):
    """Keyframe stage, then full-sequence stage. Checkpoints at each stage boundary when ``run_dir`` is set."""
    gen = torch.Generator().manual_seed(config.seed + 11)
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
    stages = (("keyframe", ctx.pseudo.keyframes, config.keyframe_steps),
              ("full", range(ctx.n_frames), config.full_steps))
    for n, (stage, frames, steps) in enumerate(stages, start=1):
        state.stage = stage
        for t, cam in schedule(frames, len(ctx.cameras), steps):
            rec = stylize_step(state, ctx, t, cam, config, gen)
            if on_step is not None:
                on_step(rec)
        if run_dir is not None:
            save_checkpoint(state.stylized, Path(run_dir) / f"stylized_stage{n}.ckpt")
    return state.stylized


def write_losses(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for rec in history:
            w.writerow([rec["step"]] + [repr(float(rec[k])) for k in LOSS_COLUMNS[1:]])


def read_losses(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(r[k]) if k == "step" else float(r[k])) for k in LOSS_COLUMNS} for r in rows]


LOSS_COLUMNS = ("step", "coarse", "fine", "tv", "total")
