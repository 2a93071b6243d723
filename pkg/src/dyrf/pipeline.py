"""Run-directory orchestration shared by the command line and the acceptance harness."""

from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import io, synth
from .config import StyleConfig
from .features import ExtractorWeights
from .field import load_checkpoint, save_checkpoint
from .metrics import (MetricReport, consistency_per_pair, ref_perceptual_per_frame)
from .pseudo import PseudoReferenceSet, import_pseudo_refs, load_pseudo_set, propagate_style, select_keyframes
from .render import render_image
from .style2d import posterize
from .train import (StyleContext, finetune_viewdir_zero, new_state, pretrain_photoreal, read_losses, run_schedule,
                    write_losses)

log = logging.getLogger(__name__)

DATA = "data"
PHOTOREAL = "photoreal.ckpt"
FINAL = "stylized_stage2.ckpt"
NO_COARSE = "ablation_no_coarse"


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    def __truediv__(self, name):
        return self.root / name

    def config(self, override: Optional[StyleConfig] = None) -> StyleConfig:
        if override is not None:
            return override
        path = self.root / "config.json"
        return StyleConfig.load(str(path)) if path.exists() else StyleConfig()

    def dataset(self, dtype=torch.float32):
        if not (self.root / DATA / "scene.json").exists():
            raise FileNotFoundError(f"no dataset under {self.root / DATA}; run synth first")
        return synth.load_dataset(self.root / DATA, dtype)

    def extractor(self, config: StyleConfig) -> ExtractorWeights:
        if config.extractor:
            return ExtractorWeights.load(config.extractor)
        return ExtractorWeights.seeded(0)


def resolve_config(run: RunDir, config_path=None, seed=None) -> StyleConfig:
    cfg = StyleConfig.load(config_path) if config_path else run.config()
    if seed is not None:
        cfg.seed = int(seed)
    return cfg


def do_synth(run: RunDir, scene: str = "orbit-spheres", config: Optional[StyleConfig] = None):
    run.root.mkdir(parents=True, exist_ok=True)
    spec = synth.load_scene(scene)
    manifest = synth.emit_dataset(spec, run / DATA)
    cfg = run.config(config)
    cfg.save(run / "config.json")
    return manifest


def do_train(run: RunDir, config: Optional[StyleConfig] = None):
    cfg = run.config(config)
    cfg.save(run / "config.json")
    torch.manual_seed(cfg.seed)
    dataset = run.dataset()
    t0 = time.time()
    field, report = pretrain_photoreal(dataset, cfg)
    finetune_viewdir_zero(field, dataset, cfg)
    report["seconds"] = time.time() - t0
    save_checkpoint(field, run / PHOTOREAL)
    with open(run / "train_report.json", "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    return field, report


def load_photoreal(run: RunDir):
    if not (run / PHOTOREAL).exists():
        raise FileNotFoundError(f"{run / PHOTOREAL} missing; run train first")
    return load_checkpoint(run / PHOTOREAL)


def do_render(run: RunDir, t: int, camera: int, which: str = "auto"):
    """Render one (frame, camera) of the stylized field when present, else the photoreal one."""
    spec = run.dataset().spec
    if not 0 <= camera < len(spec.cameras):
        raise ValueError(f"camera {camera} outside 0..{len(spec.cameras) - 1}")
    if not 0 <= t < spec.n_frames:
        raise ValueError(f"frame {t} outside 0..{spec.n_frames - 1}")
    cfg = run.config()
    if which == "auto":
        which = "stylized" if (run / FINAL).exists() else "photoreal"
    field = load_checkpoint(run / (FINAL if which == "stylized" else PHOTOREAL))
    img = render_image(field, spec.cameras[camera], t, cfg.n_samples, background=spec.background).rgb
    out = run / "renders"
    out.mkdir(exist_ok=True)
    path = out / f"{which}_c{camera:02d}_t{t:03d}.png"
    io.save_png(path, img)
    return path


def do_pseudo(run: RunDir, ref_png=None, ref_frame: Optional[int] = None, import_dir=None,
              config: Optional[StyleConfig] = None) -> PseudoReferenceSet:
    """Author (or load) the stylized reference, then generate or import the pseudo-references."""
    cfg = run.config(config)
    if ref_frame is not None:
        cfg.reference_frame = int(ref_frame)
        cfg.save(run / "config.json")
    spec = run.dataset().spec
    k, rc = cfg.reference_frame, cfg.reference_camera
    if not 0 <= k < spec.n_frames:
        raise ValueError(f"reference frame {k} outside 0..{spec.n_frames - 1}")
    field = load_photoreal(run)
    cam = spec.cameras[rc]
    frames = [render_image(field, cam, t, cfg.n_samples, background=spec.background).rgb
              for t in range(spec.n_frames)]
    # store the photoreal time-lapse quantized, the same way every stylized image is stored
    frames = [_quantized(f) for f in frames]
    io.save_png(run / "reference.png", frames[k])
    if ref_png is not None:
        stylized = io.load_png(ref_png)
        if stylized.shape != frames[k].shape:
            raise ValueError("stylized reference size does not match the reference camera")
    else:
        stylized = _quantized(posterize(frames[k]))
    io.save_png(run / "stylized_ref.png", stylized)
    if import_dir is not None:
        pset = import_pseudo_refs(import_dir, stylized, k, spec.n_frames, cfg.n_keyframes, rc)
    else:
        out = propagate_style(stylized, frames, k, cfg.patch_size, cfg.window, cfg.pyramid_levels)
        pset = PseudoReferenceSet([_quantized(f) for f in out], k, rc,
                                  select_keyframes(spec.n_frames, k, cfg.n_keyframes))
    pset.save(run / "pseudo")
    return pset


def _quantized(img):
    return torch.tensor(io.quantize(img), dtype=torch.float32) / 255.0


def do_stylize(run: RunDir, config: Optional[StyleConfig] = None, ablation: Optional[str] = None):
    """Run the two-stage schedule; writes checkpoints, ``losses.csv`` and previews."""
    cfg = run.config(config)
    out = run.root
    if ablation == "no-coarse":
        cfg = StyleConfig.from_dict({**cfg.to_dict(), "lambda_coarse": 0.0})
        out = run / NO_COARSE
        out.mkdir(exist_ok=True)
        cfg.save(out / "config.json")
    elif ablation is not None:
        raise ValueError(f"unknown ablation {ablation!r}")
    torch.manual_seed(cfg.seed)
    spec = run.dataset().spec
    photoreal = load_photoreal(run)
    pset = load_pseudo_set(run / "pseudo")
    if pset.n_frames != spec.n_frames:
        raise ValueError("pseudo-references do not cover every frame")
    ctx = StyleContext(photoreal, spec.cameras, pset, run.extractor(cfg), cfg, spec.background)
    state = new_state(photoreal, cfg)
    run_schedule(state, ctx, cfg, out)
    if cfg.keyframe_steps + cfg.full_steps == 0:
        save_checkpoint(state.stylized, out / FINAL)
    write_losses(state.history, out / "losses.csv")
    cam = spec.cameras[cfg.reference_camera]
    for t in range(spec.n_frames):
        img = render_image(state.stylized, cam, t, cfg.n_samples, background=spec.background).rgb
        io.save_png(out / f"preview_t{t:03d}.png", img)
    return state


def _flows(run: RunDir, camera: int, gap: int, n_frames: int):
    out = {}
    for i in range(n_frames - gap):
        path = run / DATA / "flow" / f"c{camera:02d}_t{i:03d}_g{gap}.flow"
        if path.exists():
            out[i] = io.load_flow(path)
    return out


def sweep(field, spec, camera: int, n_samples: int):
    """Quantized renders of one camera over every frame."""
    cam = spec.cameras[camera]
    return [_quantized(render_image(field, cam, t, n_samples, background=spec.background).rgb)
            for t in range(spec.n_frames)]


def score_frames(run: RunDir, frames_by_camera, style_ref, extractor, reference_camera: int):
    """Ref-perceptual over every supplied camera sweep; consistency on the reference camera sweep."""
    spec = run.dataset().spec
    per_frame, perc = {}, []
    for cam, frames in frames_by_camera.items():
        vals = ref_perceptual_per_frame(frames, style_ref, extractor)
        per_frame[f"ref_perceptual_c{cam}"] = vals
        perc.extend(vals)
    ref_frames = frames_by_camera[reference_camera]
    scores = {}
    for gap, name in ((1, "short_range"), (7, "long_range")):
        if len(ref_frames) > gap:
            vals = consistency_per_pair(ref_frames, _flows(run, reference_camera, gap, spec.n_frames), gap)
            per_frame[f"{name}_c{reference_camera}"] = vals
            scores[name] = float(np.mean(vals))
        else:
            scores[name] = 0.0
    return float(np.mean(perc)), scores["short_range"], scores["long_range"], per_frame


def do_eval(run: RunDir, gap: Optional[int] = None, config: Optional[StyleConfig] = None) -> MetricReport:
    """Score the stylized field against its baselines; writes report JSON/CSV and figures."""
    from . import plots

    cfg = run.config(config)
    spec = run.dataset().spec
    extractor = run.extractor(cfg)
    style_ref = io.load_png(run / "stylized_ref.png")
    rc = cfg.reference_camera
    if not (run / FINAL).exists():
        raise FileNotFoundError(f"{run / FINAL} missing; run stylize first")
    stylized = load_checkpoint(run / FINAL)
    cams = range(len(spec.cameras))
    sweeps = {c: sweep(stylized, spec, c, cfg.n_samples) for c in cams}
    perc, short, long_, per_frame = score_frames(run, sweeps, style_ref, extractor, rc)
    extra = {}
    pset = load_pseudo_set(run / "pseudo")
    b_perc, b_short, b_long, b_table = score_frames(run, {rc: pset.frames}, style_ref, extractor, rc)
    extra.update({"per_frame_2d.ref_perceptual": b_perc, "per_frame_2d.short_range": b_short,
                  "per_frame_2d.long_range": b_long})
    per_frame.update({f"per_frame_2d.{k}": v for k, v in b_table.items()})
    ablation_sweeps = None
    if (run / NO_COARSE / FINAL).exists():
        ab = load_checkpoint(run / NO_COARSE / FINAL)
        ablation_sweeps = {c: sweep(ab, spec, c, cfg.n_samples) for c in cams}
        a_perc, a_short, a_long, a_table = score_frames(run, ablation_sweeps, style_ref, extractor, rc)
        extra.update({"no_coarse.ref_perceptual": a_perc, "no_coarse.short_range": a_short,
                      "no_coarse.long_range": a_long})
        per_frame.update({f"no_coarse.{k}": v for k, v in a_table.items()})
    report = MetricReport(perc, short, long_, per_frame, extra, cfg.to_dict())
    report.save(run / "report.json")
    _write_report_csv(report, run / "report.csv", gap)
    history = read_losses(run / "losses.csv") if (run / "losses.csv").exists() else []
    plots.loss_curves(history, run / "fig_losses.png")
    plots.metric_bars(report, run / "fig_metrics.png")
    plots.frame_sheet({"stylized": sweeps[rc], "per-frame 2D": pset.frames,
                       **({"no coarse": ablation_sweeps[rc]} if ablation_sweeps else {})},
                      run / "fig_frames.png")
    return report


def _write_report_csv(report: MetricReport, path, gap=None):
    rows = [("stylized", report.ref_perceptual, report.short_range, report.long_range)]
    for name in ("per_frame_2d", "no_coarse"):
        if f"{name}.ref_perceptual" in report.extra:
            rows.append((name, report.extra[f"{name}.ref_perceptual"], report.extra[f"{name}.short_range"],
                         report.extra[f"{name}.long_range"]))
    cols = ["method", "ref_perceptual", "short_range", "long_range"]
    if gap == 1:
        cols, rows = cols[:2] + cols[2:3], [r[:3] for r in rows]
    elif gap == 7:
        cols, rows = cols[:2] + cols[3:], [r[:2] + r[3:] for r in rows]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])
