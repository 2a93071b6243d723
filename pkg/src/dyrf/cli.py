"""Command-line entry point: synth, train, render, pseudo, stylize, eval, selftest."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import torch

from .train import DivergenceError

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dyrf", description="Reference-based stylization of dynamic radiance fields.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text, run_dir=True):
        sp = sub.add_parser(name, help=help_text)
        if run_dir:
            sp.add_argument("--run-dir", required=True, help="all outputs go here")
            sp.add_argument("--seed", type=int, default=None)
            sp.add_argument("--config", default=None, help="StyleConfig JSON")
        return sp

    sp = command("synth", "emit a synthetic dataset")
    sp.add_argument("--scene", default="orbit-spheres", help="bundled scene name or scene JSON")
    command("train", "photoreal pretraining and view-direction finetune")
    sp = command("render", "render one frame of the stylized (or photoreal) field")
    sp.add_argument("--t", type=int, default=0)
    sp.add_argument("--camera", type=int, default=0)
    sp = command("pseudo", "generate or import temporal pseudo-references")
    sp.add_argument("--ref", default=None, help="stylized reference PNG; default is the built-in posterizer")
    sp.add_argument("--ref-frame", type=int, default=None)
    sp.add_argument("--import-pseudo", default=None, help="directory of pseudo_%%04d.png frames")
    sp = command("stylize", "run the keyframe and full-sequence stylization stages")
    sp.add_argument("--ablation", choices=["no-coarse"], default=None)
    sp = command("eval", "metrics report with baselines and figures")
    sp.add_argument("--gap", type=int, choices=[1, 7], default=None, help="restrict the CSV to one range")
    command("selftest", "run the built-in oracle checks", run_dir=False)
    return p


def _threads():
    n = os.environ.get("DYRF_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def run(args) -> int:
    from . import pipeline

    if args.command == "selftest":
        from .selftest import run_all

        return EXIT_OK if run_all(print) else EXIT_NUMERIC
    rd = pipeline.RunDir(args.run_dir)
    cfg = pipeline.resolve_config(rd, args.config, args.seed)
    if args.command == "synth":
        pipeline.do_synth(rd, args.scene, cfg)
    elif args.command == "train":
        _, report = pipeline.do_train(rd, cfg)
        print(f"held-out PSNR {report.get('holdout_psnr', float('nan')):.2f} dB")
    elif args.command == "render":
        print(pipeline.do_render(rd, args.t, args.camera))
    elif args.command == "pseudo":
        pipeline.do_pseudo(rd, args.ref, args.ref_frame, args.import_pseudo, cfg)
    elif args.command == "stylize":
        pipeline.do_stylize(rd, cfg, args.ablation)
    elif args.command == "eval":
        report = pipeline.do_eval(rd, args.gap, cfg)
        print(f"ref_perceptual={report.ref_perceptual:.6f} short_range={report.short_range:.6f} "
              f"long_range={report.long_range:.6f}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    _threads()
    try:
        return run(args)
    except (FloatingPointError, DivergenceError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
